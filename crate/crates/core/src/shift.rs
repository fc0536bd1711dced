//! Simulated covariate shift: biased source/target sampling along the first
//! principal component of `(x, a)`.
//!
//! The target prior is a normal density matching the component's mean and
//! standard deviation; the source prior is offset by `alpha` and narrowed by
//! `beta`. Source rows are drawn first without replacement in proportion to the
//! source prior, then target rows from what remains in proportion to the
//! target prior.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density::fit_pca;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Measure `alpha` in standard deviations of the component.
    #[serde(default = "default_true")]
    pub alpha_in_std_units: bool,
}

fn default_fraction() -> f64 {
    0.4
}

fn default_true() -> bool {
    true
}

impl ShiftConfig {
    pub fn new(alpha: f64, beta: f64, seed: u64) -> Self {
        ShiftConfig { alpha, beta, sample_fraction: 0.4, seed, alpha_in_std_units: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "sample fraction must lie in (0, 0.5] so both samples fit, got {}",
                self.sample_fraction
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }
}

/// The three shift intensities of the benchmark protocol, from near-iid to strong.
pub const STANDARD_SETTINGS: [(f64, f64); 3] = [(0.0, 1.0), (1.0, 2.0), (1.5, 3.0)];

/// Target labels withheld from training code.
#[derive(Clone, PartialEq, Eq)]
pub struct SealedLabels(Vec<u8>);

impl std::fmt::Debug for SealedLabels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SealedLabels(<{} sealed>)", self.0.len())
    }
}

impl SealedLabels {
    pub fn new(labels: Vec<u8>) -> Self {
        SealedLabels(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn reveal(&self) -> &[u8] {
        &self.0
    }

    /// Writes a single `label` column, one row per target row.
    pub fn write_csv<W: Write>(&self, writer: W, column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([column])?;
        for y in &self.0 {
            w.write_record([y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Realized location and spread of the component in each sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftStats {
    pub full_mean: f64,
    pub full_std: f64,
    pub source_mean: f64,
    pub source_std: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

#[derive(Debug, Clone)]
pub struct ShiftSplit {
    pub source: Dataset,
    pub target_unlabeled: Dataset,
    pub target_labels_sealed: SealedLabels,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub source_projection: Vec<f64>,
    pub target_projection: Vec<f64>,
    pub stats: ShiftStats,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn normal_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln()
}

/// Draws `k` of `candidates` without replacement, each step picking a remaining
/// row with probability proportional to `exp(log_weight)`.
///
/// Implemented with Gumbel keys: perturbing each log-weight by independent
/// Gumbel noise and keeping the `k` largest yields exactly the distribution of
/// the sequential procedure, in the same order, while staying in log space.
fn draw_proportional(candidates: &[usize], log_weight: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (log_weight[i] - (-u.ln()).ln(), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn biased_split(data: &Dataset, cfg: &ShiftConfig) -> Result<ShiftSplit> {
    cfg.validate()?;
    let labels = data.require_labels()?.to_vec();
    let n = data.n();
    let size = (cfg.sample_fraction * n as f64).round() as usize;
    if size < 10 {
        return Err(Error::Size(format!(
            "{n} rows at fraction {} give samples of {size}; at least 10 required",
            cfg.sample_fraction
        )));
    }
    if 2 * size > n {
        return Err(Error::Size(format!("cannot draw two disjoint samples of {size} from {n} rows")));
    }

    let pca = fit_pca(&data.covariates_with_attribute(), 1)?;
    let proj: Vec<f64> = pca.project(&data.covariates_with_attribute()).column(0).iter().copied().collect();
    let (full_mean, full_std) = mean_std(&proj);
    let offset = if cfg.alpha_in_std_units { cfg.alpha * full_std } else { cfg.alpha };
    let src_mean = full_mean + offset;
    let src_sd = full_std / cfg.beta;

    let src_logw: Vec<f64> = proj.iter().map(|&c| normal_log_density(c, src_mean, src_sd)).collect();
    let trg_logw: Vec<f64> = proj.iter().map(|&c| normal_log_density(c, full_mean, full_std)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<usize> = (0..n).collect();
    let source_indices = draw_proportional(&all, &src_logw, size, &mut rng);
    let mut taken = vec![false; n];
    source_indices.iter().for_each(|&i| taken[i] = true);
    let remaining: Vec<usize> = all.into_iter().filter(|&i| !taken[i]).collect();
    let target_indices = draw_proportional(&remaining, &trg_logw, size, &mut rng);

    let source_projection: Vec<f64> = source_indices.iter().map(|&i| proj[i]).collect();
    let target_projection: Vec<f64> = target_indices.iter().map(|&i| proj[i]).collect();
    let (source_mean, source_std) = mean_std(&source_projection);
    let (target_mean, target_std) = mean_std(&target_projection);

    let source = data.subset(&source_indices);
    let (target_unlabeled, _) = data.subset(&target_indices).split_labels();
    let sealed = SealedLabels(target_indices.iter().map(|&i| labels[i]).collect());

    Ok(ShiftSplit {
        source,
        target_unlabeled,
        target_labels_sealed: sealed,
        source_indices,
        target_indices,
        source_projection,
        target_projection,
        stats: ShiftStats { full_mean, full_std, source_mean, source_std, target_mean, target_std },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand_distr::StandardNormal;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| rng.sample::<f64, _>(StandardNormal) * (3 - j) as f64);
        let a = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let y = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(x, a, Some(y), vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn samples_are_disjoint_and_sized() {
        let data = toy(203, 1);
        for &(alpha, beta) in &STANDARD_SETTINGS {
            let split = biased_split(&data, &ShiftConfig::new(alpha, beta, 4)).unwrap();
            let want = (0.4f64 * 203.0).round() as usize;
            assert_eq!(split.source.n(), want);
            assert_eq!(split.target_unlabeled.n(), want);
            assert_eq!(split.target_labels_sealed.len(), want);
            let mut all: Vec<usize> = split.source_indices.iter().chain(&split.target_indices).copied().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 2 * want);
            assert!(split.target_unlabeled.labels().is_none());
            assert!(split.source.labels().is_some());
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let data = toy(150, 2);
        let a = biased_split(&data, &ShiftConfig::new(1.0, 2.0, 9)).unwrap();
        let b = biased_split(&data, &ShiftConfig::new(1.0, 2.0, 9)).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        assert_eq!(a.target_indices, b.target_indices);
        let c = biased_split(&data, &ShiftConfig::new(1.0, 2.0, 10)).unwrap();
        assert_ne!(a.source_indices, c.source_indices);
    }

    #[test]
    fn too_few_rows_is_size_error() {
        let data = toy(20, 3);
        assert!(matches!(biased_split(&data, &ShiftConfig::new(0.0, 1.0, 0)), Err(Error::Size(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let data = toy(100, 3);
        let mut cfg = ShiftConfig::new(0.0, 0.0, 0);
        assert!(biased_split(&data, &cfg).is_err());
        cfg.beta = 1.0;
        cfg.sample_fraction = 0.6;
        assert!(biased_split(&data, &cfg).is_err());
    }

    #[test]
    fn unlabeled_input_rejected() {
        let (data, _) = toy(100, 3).split_labels();
        assert!(biased_split(&data, &ShiftConfig::new(0.0, 1.0, 0)).is_err());
    }

    #[test]
    fn sealed_labels_debug_hides_values() {
        let s = SealedLabels::new(vec![1, 0, 1]);
        assert_eq!(format!("{s:?}"), "SealedLabels(<3 sealed>)");
    }

    #[test]
    fn gumbel_draw_tracks_weights() {
        // with one overwhelmingly heavy row, it is drawn first every time
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logw = vec![0.0, 0.0, 50.0, 0.0];
        for _ in 0..50 {
            let picked = draw_proportional(&[0, 1, 2, 3], &logw, 2, &mut rng);
            assert_eq!(picked[0], 2);
        }
        // equal weights: first pick roughly uniform
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[draw_proportional(&[0, 1, 2, 3], &[0.0; 4], 1, &mut rng)[0]] += 1;
        }
        assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");
    }
}
