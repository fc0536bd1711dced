//! `fairshift`: ingest tabular data, simulate covariate shift, train and score
//! fair classifiers, and run the repeated-split benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fairshift::data::{load_csv_with, write_csv, zscore_normalize, ColumnSelection, Dataset, LabelPolicy, SchemaConfig};
use fairshift::density::{build_density_info, DensityConfig, DensityInfo};
use fairshift::eval::{evaluate, run_experiment, write_outputs, ExperimentConfig, MetricReport};
use fairshift::fair::FairnessCriterion;
use fairshift::model::{fit_method, FitContext, Method, ModelDocument};
use fairshift::shift::{biased_split, ShiftConfig};
use fairshift::train::{TrainConfig, L2_GRID};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fairshift::Error),
    /// Output was written but training did not reach its tolerance.
    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if !e.is_data_error() => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "fairshift", version, about = "Fair robust classification under covariate shift")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV against its schema and print a summary.
    Ingest(IngestArgs),
    /// Draw one biased source/target split and write it to a directory.
    ShiftSample(ShiftArgs),
    /// Estimate source/target densities and their ratios for a split.
    Densities(DensityArgs),
    /// Fit one method on a split and write the model as JSON.
    Train(TrainArgs),
    /// Score a model on labeled rows and print the metric report.
    Evaluate(EvaluateArgs),
    /// Run the full repeated-split benchmark from a config file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args)]
struct ShiftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.4)]
    fraction: f64,
    /// Skip z-scoring the numeric columns before sampling.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DensityFlags {
    #[arg(long, default_value_t = 0.3)]
    bandwidth: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
}

impl DensityFlags {
    fn config(&self) -> DensityConfig {
        DensityConfig { bandwidth: self.bandwidth, epsilon: self.epsilon, ..Default::default() }
    }
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[command(flatten)]
    density: DensityFlags,
    /// Directory receiving `source_density.csv` and `target_density.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    EqualizedOpportunity,
    DemographicParity,
}

impl From<CriterionArg> for FairnessCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::EqualizedOpportunity => FairnessCriterion::EqualizedOpportunity,
            CriterionArg::DemographicParity => FairnessCriterion::DemographicParity,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    method: Method,
    /// Labeled source rows.
    #[arg(long)]
    source: PathBuf,
    /// Target rows; a label column, if present, is never read.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, value_enum, default_value = "equalized-opportunity")]
    criterion: CriterionArg,
    /// Fixed `C`; without it `C` is picked by 5-fold cross-validation.
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with training settings; flags above override its `l2_strength` and `seed`.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[command(flatten)]
    density: DensityFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Separate one-column label file, as written by `shift-sample`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Densities of the scored rows, required by density-ratio methods.
    #[arg(long)]
    densities: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Experiment settings plus the files they act on. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    dataset: PathBuf,
    schema: PathBuf,
    output_dir: PathBuf,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .parse_filters(&std::env::var("FAIRSHIFT_LOG").unwrap_or_else(|_| "info".into()))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::ShiftSample(a) => shift_sample(a),
        Command::Densities(a) => densities(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct GroupSummary {
    rows: usize,
    positives: Option<usize>,
}

#[derive(Serialize)]
struct IngestSummary {
    rows: usize,
    features: usize,
    feature_names: Vec<String>,
    categorical_indicators: usize,
    groups: [GroupSummary; 2],
    positive_rate: Option<f64>,
}

fn ingest(a: IngestArgs) -> CliResult<()> {
    let schema = SchemaConfig::from_json_file(&a.schema)?;
    let data = load_csv_with(&a.data, &schema, LabelPolicy::Required)?;
    let labels = data.labels();
    let groups = [0u8, 1].map(|g| {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.attribute()[i] == g).collect();
        GroupSummary { rows: rows.len(), positives: labels.map(|y| rows.iter().filter(|&&i| y[i] == 1).count()) }
    });
    print_json(&IngestSummary {
        rows: data.n(),
        features: data.d(),
        feature_names: data.feature_names().to_vec(),
        categorical_indicators: data.categorical().iter().filter(|&&c| c).count(),
        groups,
        positive_rate: labels.map(|y| y.iter().map(|&v| f64::from(v)).sum::<f64>() / y.len() as f64),
    })
}

fn shift_sample(a: ShiftArgs) -> CliResult<()> {
    let schema = SchemaConfig::from_json_file(&a.schema)?;
    let mut data = load_csv_with(&a.data, &schema, LabelPolicy::Required)?;
    if !a.raw {
        data = zscore_normalize(&data, &ColumnSelection::AllNumeric)?;
    }
    let cfg = ShiftConfig { sample_fraction: a.fraction, ..ShiftConfig::new(a.alpha, a.beta, a.seed) };
    let split = biased_split(&data, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let (attr, label) = (schema.attribute_column.as_str(), schema.label_column.as_str());
    write_csv(std::fs::File::create(a.out.join("source.csv"))?, &split.source, attr, Some(label))?;
    write_csv(std::fs::File::create(a.out.join("target.csv"))?, &split.target_unlabeled, attr, None)?;
    split.target_labels_sealed.write_csv(std::fs::File::create(a.out.join("target_labels.csv"))?, label)?;
    write_json(&a.out.join("schema.json"), &SchemaConfig::encoded(label, attr))?;
    #[derive(Serialize)]
    struct SplitRecord<'a> {
        config: &'a ShiftConfig,
        stats: &'a fairshift::shift::ShiftStats,
        source_indices: &'a [usize],
        target_indices: &'a [usize],
    }
    let record = SplitRecord {
        config: &cfg,
        stats: &split.stats,
        source_indices: &split.source_indices,
        target_indices: &split.target_indices,
    };
    write_json(&a.out.join("split.json"), &record)?;
    log::info!("wrote {} source and {} target rows to {}", split.source.n(), split.target_unlabeled.n(), a.out.display());
    Ok(())
}

fn load_pair(source: &Path, target: &Path, schema: &SchemaConfig) -> CliResult<(Dataset, Dataset)> {
    let src = load_csv_with(source, schema, LabelPolicy::Required)?;
    // Target labels stay unread on every training path.
    let trg = load_csv_with(target, schema, LabelPolicy::Ignore)?;
    Ok((src, trg))
}

fn densities(a: DensityArgs) -> CliResult<()> {
    let schema = SchemaConfig::from_json_file(&a.schema)?;
    let src = load_csv_with(&a.source, &schema, LabelPolicy::Ignore)?;
    let trg = load_csv_with(&a.target, &schema, LabelPolicy::Ignore)?;
    let (si, ti) = build_density_info(&src, &trg, &a.density.config())?;
    std::fs::create_dir_all(&a.out)?;
    si.write_csv(std::fs::File::create(a.out.join("source_density.csv"))?)?;
    ti.write_csv(std::fs::File::create(a.out.join("target_density.csv"))?)?;
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let schema = SchemaConfig::from_json_file(&a.schema)?;
    let (src, trg) = load_pair(&a.source, &a.target, &schema)?;
    let density = a.density.config();
    let (si, ti) = build_density_info(&src, &trg, &density)?;
    let mut cfg: TrainConfig = match &a.train_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    let map = fairshift::data::FeatureMap::default();
    cfg.l2_strength = match a.l2 {
        Some(c) => c,
        None => fairshift::baselines::select_l2_strength(&src, &map, &L2_GRID, 5, a.seed)?.l2_strength,
    };
    let ctx = FitContext {
        source: &src,
        target: &trg,
        source_density: &si,
        target_density: &ti,
        density_config: &density,
        map,
        criterion: a.criterion.into(),
        train: cfg,
    };
    let doc = fit_method(a.method, &ctx)?;
    doc.save(&a.out)?;
    if !doc.converged {
        return Err(CliError::NotConverged(format!(
            "{} did not converge in {} iterations; model written to {}",
            a.method,
            doc.iterations,
            a.out.display()
        )));
    }
    Ok(())
}

fn read_label_file(path: &Path, column: &str) -> CliResult<Vec<u8>> {
    let mut rdr = csv::Reader::from_path(path).map_err(fairshift::Error::from)?;
    let header = rdr.headers().map_err(fairshift::Error::from)?.clone();
    let idx = header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| fairshift::Error::Schema(format!("label file lacks column `{column}`")))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(fairshift::Error::from)?;
        match &rec[idx] {
            "0" => out.push(0),
            "1" => out.push(1),
            other => return Err(fairshift::Error::Value(format!("label `{other}` is not 0 or 1")).into()),
        }
    }
    Ok(out)
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    let schema = SchemaConfig::from_json_file(&a.schema)?;
    let doc = ModelDocument::load(&a.model)?;
    let data = match &a.labels {
        Some(p) => {
            let rows = load_csv_with(&a.data, &schema, LabelPolicy::Ignore)?;
            let y = read_label_file(p, &schema.label_column)?;
            rows.with_labels(y)?
        }
        None => load_csv_with(&a.data, &schema, LabelPolicy::Required)?,
    };
    let ratios = match &a.densities {
        Some(p) => {
            let info = DensityInfo::read_csv(std::fs::File::open(p)?)?;
            if info.len() != data.n() {
                return Err(fairshift::Error::Data(format!("{} density rows for {} data rows", info.len(), data.n())).into());
            }
            Some(info.clipped_ratio_st(&DensityConfig::default().ratio_clip))
        }
        None if doc.method.needs_ratios() => {
            return Err(CliError::Usage(format!("{} models need --densities for the scored rows", doc.method)))
        }
        None => None,
    };
    let preds = doc.predict(&data, ratios.as_deref())?;
    let report: MetricReport = evaluate(&preds, a.threshold, data.require_labels()?, data.attribute())?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

#[derive(Serialize)]
struct SplitSeed {
    alpha: f64,
    beta: f64,
    repetition: usize,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest {
    tool: String,
    version: String,
    config_sha256: String,
    dataset_sha256: String,
    schema_sha256: String,
    base_seed: u64,
    split_seeds: Vec<SplitSeed>,
    rows: usize,
    failed_cells: usize,
    interval: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", a.config.display())))?;
    let mut run: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", a.config.display())))?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    run.dataset = resolve(&run.dataset);
    run.schema = resolve(&run.schema);
    run.output_dir = a.out.clone().unwrap_or_else(|| resolve(&run.output_dir));
    for p in [&run.dataset, &run.schema] {
        if !p.is_file() {
            return Err(CliError::Usage(format!("config references missing file {}", p.display())));
        }
    }
    let schema = SchemaConfig::from_json_file(&run.schema)?;
    let data = load_csv_with(&run.dataset, &schema, LabelPolicy::Required)?;
    let exp = &run.experiment;
    let result = run_experiment(&data, exp)?;
    write_outputs(&result, &run.output_dir)?;

    let resolved = serde_json::to_string_pretty(&run)?;
    std::fs::write(run.output_dir.join("config.json"), resolved.clone() + "\n")?;
    let split_seeds = exp
        .settings
        .iter()
        .enumerate()
        .flat_map(|(s, &(alpha, beta))| {
            (0..exp.repetitions).map(move |r| SplitSeed { alpha, beta, repetition: r, seed: exp.split_seed(s, r) })
        })
        .collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(serde_json::to_string(&exp)?.as_bytes()),
        dataset_sha256: sha256_hex(&std::fs::read(&run.dataset)?),
        schema_sha256: sha256_hex(&std::fs::read(&run.schema)?),
        base_seed: exp.base_seed,
        split_seeds,
        rows: result.rows.len(),
        failed_cells: result.rows.iter().filter(|r| r.failed()).count(),
        interval: "mean +/- 1.96 * sample sd / sqrt(R)".into(),
    };
    write_json(&run.output_dir.join("manifest.json"), &manifest)?;
    log::info!("wrote {} result rows to {}", result.rows.len(), run.output_dir.display());
    Ok(())
}
