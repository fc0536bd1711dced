//! Metrics, confidence intervals and the repeated-split experiment runner.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::select_l2_strength;
use crate::data::{zscore_normalize, ColumnSelection, Dataset, FeatureMap};
use crate::density::{build_density_info, DensityConfig};
use crate::error::{Error, Result};
use crate::fair::FairnessCriterion;
use crate::model::{fit_method, FitContext, Method, ModelDocument};
use crate::shift::{biased_split, SealedLabels, ShiftConfig, ShiftStats, STANDARD_SETTINGS};
use crate::train::{TrainConfig, L2_GRID};

/// z value of the two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub error: f64,
    /// `|TPR_1 - TPR_0|`; `None` when a group has no positives.
    pub deo: Option<f64>,
    /// `|P(yhat=1 | a=1) - P(yhat=1 | a=0)|`; `None` when a group is empty.
    pub dp_gap: Option<f64>,
    /// `max(|TPR_1 - TPR_0|, |FPR_1 - FPR_0|)`; `None` when any rate is undefined.
    pub deodds: Option<f64>,
    pub tpr: [Option<f64>; 2],
    pub fpr: [Option<f64>; 2],
    pub flags: Vec<String>,
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

fn gap(r: [Option<f64>; 2]) -> Option<f64> {
    Some((r[1]? - r[0]?).abs())
}

/// Thresholds `predictions` at `threshold` (`yhat = 1` iff `p >= threshold`)
/// and scores the hard predictions against `truth`.
pub fn evaluate(predictions: &[f64], threshold: f64, truth: &[u8], attribute: &[u8]) -> Result<MetricReport> {
    let n = predictions.len();
    if truth.len() != n || attribute.len() != n {
        return Err(Error::Data(format!(
            "{n} predictions, {} labels, {} attributes",
            truth.len(),
            attribute.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    // [group][label] -> (rows, predicted positive)
    let mut counts = [[(0usize, 0usize); 2]; 2];
    let mut wrong = 0usize;
    for i in 0..n {
        let yhat = u8::from(predictions[i] >= threshold);
        let cell = &mut counts[usize::from(attribute[i])][usize::from(truth[i])];
        cell.0 += 1;
        cell.1 += usize::from(yhat);
        wrong += usize::from(yhat != truth[i]);
    }
    let tpr = [0, 1].map(|g| rate(counts[g][1].1, counts[g][1].0));
    let fpr = [0, 1].map(|g| rate(counts[g][0].1, counts[g][0].0));
    let ppr = [0, 1].map(|g| rate(counts[g][0].1 + counts[g][1].1, counts[g][0].0 + counts[g][1].0));
    let mut flags = Vec::new();
    for g in 0..2 {
        if tpr[g].is_none() {
            flags.push(format!("tpr_undefined_group{g}"));
        }
        if fpr[g].is_none() {
            flags.push(format!("fpr_undefined_group{g}"));
        }
        if ppr[g].is_none() {
            flags.push(format!("empty_group{g}"));
        }
    }
    let deo = gap(tpr);
    let deodds = match (deo, gap(fpr)) {
        (Some(t), Some(f)) => Some(t.max(f)),
        _ => None,
    };
    Ok(MetricReport { error: wrong as f64 / n as f64, deo, dp_gap: gap(ppr), deodds, tpr, fpr, flags })
}

/// Scores predictions against withheld target labels. This is the only place
/// sealed labels are opened.
pub fn evaluate_sealed(
    predictions: &[f64],
    threshold: f64,
    sealed: &SealedLabels,
    attribute: &[u8],
) -> Result<MetricReport> {
    evaluate(predictions, threshold, sealed.reveal(), attribute)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub halfwidth: f64,
    pub count: usize,
    /// Set when a single value made the spread undefined and it was reported as 0.
    pub singleton: bool,
}

/// Mean and normal-approximation 95% half-width `1.96 * sd / sqrt(R)`, with the
/// sample standard deviation.
pub fn aggregate_ci(values: &[f64]) -> Result<Interval> {
    let r = values.len();
    if r == 0 {
        return Err(Error::Data("cannot aggregate an empty list".into()));
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    if r == 1 {
        return Ok(Interval { mean, halfwidth: 0.0, count: 1, singleton: true });
    }
    // Identical values must give width 0 exactly, not a rounding residue of the mean.
    let var = if values.iter().all(|&v| v == values[0]) {
        0.0
    } else {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64
    };
    Ok(Interval { mean, halfwidth: Z_95 * var.sqrt() / (r as f64).sqrt(), count: r, singleton: false })
}

/// How `C` is chosen for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Choice {
    Fixed(f64),
    /// k-fold cross-validated plain logistic regression on the source sample.
    CrossValidated { grid: Vec<f64>, folds: usize },
}

impl Default for L2Choice {
    fn default() -> Self {
        L2Choice::CrossValidated { grid: L2_GRID.to_vec(), folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    /// `(alpha, beta)` pairs.
    pub settings: Vec<(f64, f64)>,
    pub repetitions: usize,
    pub methods: Vec<Method>,
    pub sample_fraction: f64,
    pub density: DensityConfig,
    pub train: TrainConfig,
    pub l2: L2Choice,
    pub feature_map: FeatureMap,
    pub criterion: FairnessCriterion,
    pub threshold: f64,
    pub base_seed: u64,
    /// z-score every non-categorical column of the pool before splitting.
    pub standardize: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_name: "dataset".into(),
            settings: STANDARD_SETTINGS.to_vec(),
            repetitions: 10,
            methods: Method::ALL.to_vec(),
            sample_fraction: 0.4,
            density: DensityConfig::default(),
            train: TrainConfig::default(),
            l2: L2Choice::default(),
            feature_map: FeatureMap::default(),
            criterion: FairnessCriterion::EqualizedOpportunity,
            threshold: 0.5,
            base_seed: 0,
            standardize: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() || self.repetitions == 0 || self.methods.is_empty() {
            return Err(Error::Config("need at least one setting, repetition and method".into()));
        }
        for &(alpha, beta) in &self.settings {
            ShiftConfig { sample_fraction: self.sample_fraction, ..ShiftConfig::new(alpha, beta, 0) }.validate()?;
        }
        self.density.validate()?;
        self.train.validate()?;
        if let L2Choice::Fixed(c) = self.l2 {
            if !(c >= 0.0) {
                return Err(Error::Config(format!("C must be non-negative, got {c}")));
            }
        }
        Ok(())
    }

    /// Seed of split `(setting, repetition)`, fixed by the base seed alone.
    pub fn split_seed(&self, setting: usize, repetition: usize) -> u64 {
        splitmix64(splitmix64(splitmix64(self.base_seed) ^ setting as u64) ^ repetition as u64)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One `(setting, repetition, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub method: Method,
    pub error: Option<f64>,
    pub deo: Option<f64>,
    pub dp_gap: Option<f64>,
    pub deodds: Option<f64>,
    pub setting_index: usize,
    pub repetition: usize,
    pub l2_strength: Option<f64>,
    pub mu: Option<f64>,
    pub converged: Option<bool>,
    pub source_pc1_mean: Option<f64>,
    pub target_pc1_mean: Option<f64>,
    /// Semicolon-separated markers; failures carry `failed: <reason>`.
    pub flags: String,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        self.error.is_none()
    }
}

/// Mean and interval of one `(setting, method)` over its repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub alpha: f64,
    pub beta: f64,
    pub method: Method,
    pub repetitions: usize,
    pub failures: usize,
    pub error: Option<Interval>,
    pub deo: Option<Interval>,
    pub dp_gap: Option<Interval>,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub aggregate: Vec<AggregateRow>,
}

struct SplitOutcome {
    l2: f64,
    stats: ShiftStats,
    reports: Vec<(Method, Result<(ModelDocument, MetricReport)>)>,
}

fn run_split(pool: &Dataset, cfg: &ExperimentConfig, alpha: f64, beta: f64, seed: u64) -> Result<SplitOutcome> {
    let shift = ShiftConfig { sample_fraction: cfg.sample_fraction, ..ShiftConfig::new(alpha, beta, seed) };
    let split = biased_split(pool, &shift)?;
    let (src_info, trg_info) = build_density_info(&split.source, &split.target_unlabeled, &cfg.density)?;
    let l2 = match &cfg.l2 {
        L2Choice::Fixed(c) => *c,
        L2Choice::CrossValidated { grid, folds } => {
            select_l2_strength(&split.source, &cfg.feature_map, grid, *folds, seed)?.l2_strength
        }
    };
    let ctx = FitContext {
        source: &split.source,
        target: &split.target_unlabeled,
        source_density: &src_info,
        target_density: &trg_info,
        density_config: &cfg.density,
        map: cfg.feature_map,
        criterion: cfg.criterion,
        train: TrainConfig { l2_strength: l2, seed, ..cfg.train.clone() },
    };
    let trg_ratio = trg_info.clipped_ratio_st(&cfg.density.ratio_clip);
    let reports = cfg
        .methods
        .par_iter()
        .map(|&m| {
            let outcome = fit_method(m, &ctx).and_then(|doc| {
                let preds = doc.predict(&split.target_unlabeled, Some(&trg_ratio))?;
                let report = evaluate_sealed(
                    &preds,
                    cfg.threshold,
                    &split.target_labels_sealed,
                    split.target_unlabeled.attribute(),
                )?;
                Ok((doc, report))
            });
            (m, outcome)
        })
        .collect();
    Ok(SplitOutcome { l2, stats: split.stats, reports })
}

/// Runs every method on `repetitions` biased splits per shift setting and
/// scores each on its target sample. Failures are recorded per cell.
///
/// Splits run in parallel on the current rayon pool; results do not depend on
/// the pool size.
pub fn run_experiment(data: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    data.require_labels()?;
    let pool = if cfg.standardize { zscore_normalize(data, &ColumnSelection::AllNumeric)? } else { data.clone() };
    let jobs: Vec<(usize, usize)> =
        (0..cfg.settings.len()).flat_map(|s| (0..cfg.repetitions).map(move |r| (s, r))).collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (alpha, beta) = cfg.settings[s];
            let seed = cfg.split_seed(s, r);
            log::info!("split alpha={alpha} beta={beta} repetition {r} (seed {seed})");
            (s, r, seed, run_split(&pool, cfg, alpha, beta, seed))
        })
        .collect();

    let mut rows = Vec::with_capacity(outcomes.len() * cfg.methods.len());
    for (s, r, seed, outcome) in outcomes {
        let (alpha, beta) = cfg.settings[s];
        let blank = |method: Method| ResultRow {
            dataset: cfg.dataset_name.clone(),
            alpha,
            beta,
            seed,
            method,
            error: None,
            deo: None,
            dp_gap: None,
            deodds: None,
            setting_index: s,
            repetition: r,
            l2_strength: None,
            mu: None,
            converged: None,
            source_pc1_mean: None,
            target_pc1_mean: None,
            flags: String::new(),
        };
        match outcome {
            Err(e) => {
                log::warn!("split alpha={alpha} beta={beta} repetition {r} failed: {e}");
                for &m in &cfg.methods {
                    rows.push(ResultRow { flags: failure_flag(&e), ..blank(m) });
                }
            }
            Ok(split) => {
                for (m, res) in split.reports {
                    let mut row = ResultRow {
                        l2_strength: Some(split.l2),
                        source_pc1_mean: Some(split.stats.source_mean),
                        target_pc1_mean: Some(split.stats.target_mean),
                        ..blank(m)
                    };
                    match res {
                        Err(e) => {
                            log::warn!("{m} failed on alpha={alpha} beta={beta} repetition {r}: {e}");
                            row.flags = failure_flag(&e);
                        }
                        Ok((doc, report)) => {
                            let mut flags = report.flags.clone();
                            if !doc.converged {
                                flags.push("not_converged".into());
                            }
                            if doc.mu_bracketed == Some(false) {
                                flags.push("mu_unbracketed".into());
                            }
                            row.error = Some(report.error);
                            row.deo = report.deo;
                            row.dp_gap = report.dp_gap;
                            row.deodds = report.deodds;
                            row.mu = matches!(m, Method::FairLr | Method::FairLrIw | Method::FairRobustShift)
                                .then_some(doc.mu);
                            row.converged = Some(doc.converged);
                            row.flags = flags.join(";");
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    let order = |m: &Method| cfg.methods.iter().position(|x| x == m).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| (a.setting_index, a.repetition, order(&a.method)).cmp(&(b.setting_index, b.repetition, order(&b.method))));
    let aggregate = aggregate_rows(&rows)?;
    Ok(ExperimentResult { rows, aggregate })
}

fn failure_flag(e: &Error) -> String {
    format!("failed: {}", e.to_string().replace([';', '\n'], ","))
}

fn interval_of(values: Vec<f64>) -> Result<Option<Interval>> {
    if values.is_empty() {
        Ok(None)
    } else {
        aggregate_ci(&values).map(Some)
    }
}

/// Per `(dataset, setting, method)` summary, in first-appearance order.
pub fn aggregate_rows(rows: &[ResultRow]) -> Result<Vec<AggregateRow>> {
    let mut order: Vec<(String, u64, u64, Method)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, u64, Method), Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let key = (row.dataset.clone(), row.alpha.to_bits(), row.beta.to_bits(), row.method);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let ok: Vec<&&ResultRow> = members.iter().filter(|r| !r.failed()).collect();
            let collect = |f: fn(&ResultRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let error = interval_of(collect(|r| r.error))?;
            let deo = interval_of(collect(|r| r.deo))?;
            let dp_gap = interval_of(collect(|r| r.dp_gap))?;
            let mut flags = Vec::new();
            if ok.is_empty() {
                flags.push("all_failed");
            } else if ok.len() < members.len() {
                flags.push("partial");
            }
            if error.is_some_and(|i| i.singleton) {
                flags.push("single_repetition");
            }
            if deo.is_some_and(|i| i.count < ok.len()) {
                flags.push("deo_partially_undefined");
            }
            let first = members[0];
            Ok(AggregateRow {
                dataset: first.dataset.clone(),
                alpha: first.alpha,
                beta: first.beta,
                method: first.method,
                repetitions: members.len(),
                failures: members.len() - ok.len(),
                error,
                deo,
                dp_gap,
                flags: flags.join(";"),
            })
        })
        .collect()
}

const RESULT_HEADER: [&str; 17] = [
    "dataset",
    "alpha",
    "beta",
    "seed",
    "method",
    "error",
    "deo",
    "dp_gap",
    "flags",
    "deodds",
    "setting_index",
    "repetition",
    "l2_strength",
    "mu",
    "converged",
    "source_pc1_mean",
    "target_pc1_mean",
];

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell<T: std::str::FromStr>(s: &str, column: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Value(format!("bad `{column}` value `{s}`")))
}

fn required<T: std::str::FromStr>(s: &str, column: &str) -> Result<T> {
    parse_cell(s, column)?.ok_or_else(|| Error::Value(format!("missing `{column}` value")))
}

/// Long-format results, one line per cell. Floats use shortest round-trip text,
/// so reading the file back reproduces the rows exactly.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.seed.to_string(),
            r.method.to_string(),
            cell(r.error),
            cell(r.deo),
            cell(r.dp_gap),
            r.flags.clone(),
            cell(r.deodds),
            r.setting_index.to_string(),
            r.repetition.to_string(),
            cell(r.l2_strength),
            cell(r.mu),
            cell(r.converged),
            cell(r.source_pc1_mean),
            cell(r.target_pc1_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != RESULT_HEADER {
        return Err(Error::Schema(format!("unexpected results header {header:?}")));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let f = |j: usize| &rec[j];
            Ok(ResultRow {
                dataset: f(0).to_string(),
                alpha: required(f(1), "alpha")?,
                beta: required(f(2), "beta")?,
                seed: required(f(3), "seed")?,
                method: required(f(4), "method")?,
                error: parse_cell(f(5), "error")?,
                deo: parse_cell(f(6), "deo")?,
                dp_gap: parse_cell(f(7), "dp_gap")?,
                flags: f(8).to_string(),
                deodds: parse_cell(f(9), "deodds")?,
                setting_index: required(f(10), "setting_index")?,
                repetition: required(f(11), "repetition")?,
                l2_strength: parse_cell(f(12), "l2_strength")?,
                mu: parse_cell(f(13), "mu")?,
                converged: parse_cell(f(14), "converged")?,
                source_pc1_mean: parse_cell(f(15), "source_pc1_mean")?,
                target_pc1_mean: parse_cell(f(16), "target_pc1_mean")?,
            })
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "dataset",
        "alpha",
        "beta",
        "method",
        "repetitions",
        "failures",
        "error_mean",
        "error_ci95",
        "deo_mean",
        "deo_ci95",
        "dp_gap_mean",
        "dp_gap_ci95",
        "flags",
    ])?;
    for r in rows {
        let pair = |i: Option<Interval>| [cell(i.map(|i| i.mean)), cell(i.map(|i| i.halfwidth))];
        let [em, eh] = pair(r.error);
        let [dm, dh] = pair(r.deo);
        let [pm, ph] = pair(r.dp_gap);
        w.write_record([
            r.dataset.clone(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.method.to_string(),
            r.repetitions.to_string(),
            r.failures.to_string(),
            em,
            eh,
            dm,
            dh,
            pm,
            ph,
            r.flags.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub method: Method,
    pub deo_mean: Option<f64>,
    pub deo_ci95: Option<f64>,
    pub error_mean: Option<f64>,
    pub error_ci95: Option<f64>,
    pub repetitions: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPanel {
    pub dataset: String,
    pub alpha: f64,
    pub beta: f64,
    pub points: Vec<PlotPoint>,
}

/// Error against DEO per method, one panel per dataset and shift setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_axis: String,
    pub y_axis: String,
    pub interval: String,
    pub panels: Vec<PlotPanel>,
}

pub fn plot_data(aggregate: &[AggregateRow]) -> PlotData {
    let mut panels: Vec<PlotPanel> = Vec::new();
    for a in aggregate {
        let point = PlotPoint {
            method: a.method,
            deo_mean: a.deo.map(|i| i.mean),
            deo_ci95: a.deo.map(|i| i.halfwidth),
            error_mean: a.error.map(|i| i.mean),
            error_ci95: a.error.map(|i| i.halfwidth),
            repetitions: a.repetitions,
            failures: a.failures,
        };
        match panels.iter_mut().find(|p| p.dataset == a.dataset && p.alpha == a.alpha && p.beta == a.beta) {
            Some(p) => p.points.push(point),
            None => panels.push(PlotPanel { dataset: a.dataset.clone(), alpha: a.alpha, beta: a.beta, points: vec![point] }),
        }
    }
    PlotData {
        x_axis: "deo".into(),
        y_axis: "error".into(),
        interval: format!("normal approximation, mean +/- {Z_95} * sample sd / sqrt(R)"),
        panels,
    }
}

/// Writes `results.csv`, `aggregate.csv` and `plotdata.json` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_results_csv(&result.rows, std::fs::File::create(dir.join("results.csv"))?)?;
    write_aggregate_csv(&result.aggregate, std::fs::File::create(dir.join("aggregate.csv"))?)?;
    let plot = serde_json::to_string_pretty(&plot_data(&result.aggregate))?;
    std::fs::write(dir.join("plotdata.json"), plot + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::GaussianMixture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn perfect_predictions() {
        let y = [1, 0, 1, 0, 1, 1];
        let a = [0, 0, 1, 1, 1, 0];
        let p: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let m = evaluate(&p, 0.5, &y, &a).unwrap();
        assert_eq!(m.error, 0.0);
        assert_eq!(m.deo, Some(0.0));
        assert!(m.flags.is_empty());
    }

    #[test]
    fn hand_counted_deo() {
        // group 1 positives predicted (1,1,0), group 0 positives predicted (1,0)
        let p = [0.9, 0.8, 0.1, 0.7, 0.2];
        let y = [1, 1, 1, 1, 1];
        let a = [1, 1, 1, 0, 0];
        let m = evaluate(&p, 0.5, &y, &a).unwrap();
        assert!((m.deo.unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.tpr, [Some(0.5), Some(2.0 / 3.0)]);
    }

    #[test]
    fn constant_positive_classifier() {
        let y = [1, 0, 0, 1, 0];
        let a = [0, 0, 1, 1, 1];
        let m = evaluate(&[1.0; 5], 0.5, &y, &a).unwrap();
        assert_eq!(m.tpr, [Some(1.0), Some(1.0)]);
        assert_eq!(m.deo, Some(0.0));
        assert!((m.error - 0.6).abs() < 1e-15);
    }

    #[test]
    fn group_without_positives_is_undefined_not_zero() {
        let m = evaluate(&[0.9, 0.1, 0.4], 0.5, &[1, 0, 0], &[1, 0, 0]).unwrap();
        assert_eq!(m.tpr[0], None);
        assert_eq!(m.deo, None);
        assert_eq!(m.deodds, None);
        assert!(m.flags.contains(&"tpr_undefined_group0".to_string()));
    }

    #[test]
    fn length_mismatch_is_data_error() {
        assert!(matches!(evaluate(&[0.5], 0.5, &[1, 0], &[0]), Err(Error::Data(_))));
    }

    #[test]
    fn ci_examples() {
        let c = aggregate_ci(&[0.2, 0.2, 0.2]).unwrap();
        assert!((c.mean - 0.2).abs() < 1e-15 && c.halfwidth == 0.0);
        let c = aggregate_ci(&[0.1, 0.3]).unwrap();
        assert!((c.mean - 0.2).abs() < 1e-15);
        assert!((c.halfwidth - 0.196).abs() < 1e-4, "{}", c.halfwidth);
        let c = aggregate_ci(&[0.4]).unwrap();
        assert!(c.singleton && c.halfwidth == 0.0);
        assert!(aggregate_ci(&[]).is_err());
    }

    #[test]
    fn ci_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        // Oracle: Welford's running variance.
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for &x in &v {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        let hw = 1.96 * (m2 / (n - 1.0)).sqrt() / n.sqrt();
        let c = aggregate_ci(&v).unwrap();
        assert!((c.mean - mean).abs() < 1e-12 && (c.halfwidth - hw).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn evaluate_is_permutation_invariant(
            rows in prop::collection::vec((0.0f64..1.0, 0u8..2, 0u8..2), 1..60),
            seed in any::<u64>(),
        ) {
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let split = |ix: &[usize]| {
                let p: Vec<f64> = ix.iter().map(|&i| rows[i].0).collect();
                let y: Vec<u8> = ix.iter().map(|&i| rows[i].1).collect();
                let a: Vec<u8> = ix.iter().map(|&i| rows[i].2).collect();
                evaluate(&p, 0.5, &y, &a).unwrap()
            };
            let id: Vec<usize> = (0..rows.len()).collect();
            prop_assert_eq!(split(&id), split(&perm));
        }
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset_name: "toy".into(),
            settings: vec![(0.0, 1.0), (1.5, 3.0)],
            repetitions: 2,
            methods: vec![Method::Lr, Method::Hardt, Method::FairLr],
            l2: L2Choice::Fixed(1e-2),
            ..Default::default()
        }
    }

    #[test]
    fn experiment_covers_every_cell_and_round_trips() {
        let pool = GaussianMixture::default().sample(300, 4);
        let cfg = small_config();
        let res = run_experiment(&pool, &cfg).unwrap();
        assert_eq!(res.rows.len(), 2 * 2 * 3);
        assert!(res.rows.iter().all(|r| !r.failed()), "{:?}", res.rows);
        assert_eq!(res.aggregate.len(), 2 * 3);

        let mut buf = Vec::new();
        write_results_csv(&res.rows, &mut buf).unwrap();
        let back = read_results_csv(buf.as_slice()).unwrap();
        assert_eq!(back, res.rows);
        assert_eq!(aggregate_rows(&back).unwrap(), res.aggregate);

        let again = run_experiment(&pool, &cfg).unwrap();
        assert_eq!(again, res);
    }

    #[test]
    fn single_repetition_is_flagged() {
        let pool = GaussianMixture::default().sample(200, 5);
        let cfg = ExperimentConfig { repetitions: 1, settings: vec![(1.0, 2.0)], ..small_config() };
        let res = run_experiment(&pool, &cfg).unwrap();
        for a in &res.aggregate {
            assert_eq!(a.error.unwrap().halfwidth, 0.0);
            assert!(a.flags.contains("single_repetition"));
        }
    }

    #[test]
    fn failing_split_is_recorded_not_fatal() {
        // 20 rows give samples of 8, below the sampler's minimum.
        let pool = GaussianMixture::default().sample(20, 6);
        let res = run_experiment(&pool, &small_config()).unwrap();
        assert!(res.rows.iter().all(|r| r.failed() && r.flags.starts_with("failed:")));
        assert!(res.aggregate.iter().all(|a| a.flags.contains("all_failed") && a.error.is_none()));
    }

    #[test]
    fn split_seeds_are_distinct() {
        let cfg = ExperimentConfig::default();
        let mut seeds: Vec<u64> = (0..3).flat_map(|s| (0..10).map(move |r| (s, r))).map(|(s, r)| cfg.split_seed(s, r)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 30);
    }
}
