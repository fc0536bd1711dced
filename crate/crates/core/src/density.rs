//! Density-ratio estimation: project covariates onto their leading principal
//! components, fit an isotropic Gaussian KDE to each sample, smooth the
//! resulting densities with an additive floor, and form the two directed ratios.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One unit-norm row per component, ordered by explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Coordinates of every row of `points` along each component.
    pub fn project(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.components.len();
        DMatrix::from_fn(points.nrows(), q, |i, c| {
            self.components[c]
                .iter()
                .enumerate()
                .map(|(j, w)| w * (points[(i, j)] - self.mean[j]))
                .sum()
        })
    }
}

/// Principal components of `points` (rows are observations) from the
/// eigendecomposition of the sample covariance. Each component's
/// largest-magnitude coordinate is made positive.
pub fn fit_pca(points: &DMatrix<f64>, q: usize) -> Result<PcaModel> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(Error::Size(format!("PCA needs at least 2 points, got {n}")));
    }
    if q == 0 || q > n.min(d) {
        return Err(Error::Config(format!("cannot extract {q} components from {n}x{d} data")));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.column(j).mean()).collect();
    let mut centered = points.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().sum();
    if total <= f64::EPSILON {
        return Err(Error::Degenerate("all points are identical; covariance is zero".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(q);
    let mut explained_variance = Vec::with_capacity(q);
    for &k in order.iter().take(q) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel { mean, components, explained_variance })
}

/// Isotropic Gaussian KDE fitted on `fit_points`, evaluated at each row of
/// `eval_points`. Both matrices must have the same number of columns.
pub fn kde_density(fit_points: &DMatrix<f64>, eval_points: &DMatrix<f64>, bandwidth: f64) -> Vec<f64> {
    let k = fit_points.nrows();
    let dim = fit_points.ncols();
    assert_eq!(dim, eval_points.ncols(), "fit and eval points differ in dimension");
    assert!(k >= 1 && bandwidth > 0.0);
    let two_var = 2.0 * bandwidth * bandwidth;
    let norm = (2.0 * PI * bandwidth * bandwidth).powf(-(dim as f64) / 2.0) / k as f64;
    // Row-major copies keep the inner loop on contiguous memory.
    let fit: Vec<f64> = fit_points.transpose().as_slice().to_vec();
    (0..eval_points.nrows())
        .map(|i| {
            let z: Vec<f64> = eval_points.row(i).iter().copied().collect();
            let s: f64 = fit
                .chunks_exact(dim)
                .map(|p| {
                    let sq: f64 = p.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-sq / two_var).exp()
                })
                .sum();
            s * norm
        })
        .collect()
}

/// `(d_i + eps) / sum_j (d_j + eps)`.
pub fn normalize_densities(raw: &[f64], epsilon: f64) -> Vec<f64> {
    let total: f64 = raw.iter().map(|d| d + epsilon).sum();
    raw.iter().map(|d| (d + epsilon) / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioClip {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for RatioClip {
    fn default() -> Self {
        RatioClip { floor: 1e-3, ceiling: 1e3 }
    }
}

impl RatioClip {
    pub fn apply(&self, r: f64) -> f64 {
        r.clamp(self.floor, self.ceiling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub bandwidth: f64,
    pub epsilon: f64,
    pub num_components: usize,
    pub ratio_clip: RatioClip,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig { bandwidth: 0.3, epsilon: 0.01, num_components: 2, ratio_clip: RatioClip::default() }
    }
}

impl DensityConfig {
    /// Smaller smoothing floor used for small datasets.
    pub fn small_dataset() -> Self {
        DensityConfig { epsilon: 0.001, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("bandwidth and epsilon must be positive".into()));
        }
        if !(self.ratio_clip.floor > 0.0 && self.ratio_clip.floor <= self.ratio_clip.ceiling) {
            return Err(Error::Config("ratio clip needs 0 < floor <= ceiling".into()));
        }
        if self.num_components == 0 {
            return Err(Error::Config("num_components must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable identifier of the settings, recorded alongside trained models.
    pub fn fingerprint(&self) -> String {
        format!(
            "kde(bw={},eps={},q={},clip=[{},{}])",
            self.bandwidth, self.epsilon, self.num_components, self.ratio_clip.floor, self.ratio_clip.ceiling
        )
    }
}

/// Normalized source/target densities of one evaluation set and the ratios
/// between them. Ratios are stored unclipped; consumers clip on use.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityInfo {
    pub src_density: Vec<f64>,
    pub trg_density: Vec<f64>,
    pub ratio_st: Vec<f64>,
    pub ratio_ts: Vec<f64>,
}

impl DensityInfo {
    pub fn from_densities(src_density: Vec<f64>, trg_density: Vec<f64>) -> Result<Self> {
        if src_density.len() != trg_density.len() {
            return Err(Error::Data("density vectors differ in length".into()));
        }
        if src_density.iter().chain(&trg_density).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Numerical("densities must be finite and positive".into()));
        }
        let ratio_st = src_density.iter().zip(&trg_density).map(|(s, t)| s / t).collect();
        let ratio_ts = src_density.iter().zip(&trg_density).map(|(s, t)| t / s).collect();
        Ok(DensityInfo { src_density, trg_density, ratio_st, ratio_ts })
    }

    /// Every ratio equal to one: no shift.
    pub fn uniform(n: usize) -> Self {
        let p = vec![1.0 / n.max(1) as f64; n];
        DensityInfo::from_densities(p.clone(), p).expect("uniform densities are valid")
    }

    pub fn len(&self) -> usize {
        self.ratio_st.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratio_st.is_empty()
    }

    pub fn clipped_ratio_st(&self, clip: &RatioClip) -> Vec<f64> {
        self.ratio_st.iter().map(|&r| clip.apply(r)).collect()
    }

    pub fn clipped_ratio_ts(&self, clip: &RatioClip) -> Vec<f64> {
        self.ratio_ts.iter().map(|&r| clip.apply(r)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "src_density", "trg_density", "ratio_st"])?;
        for i in 0..self.len() {
            w.write_record(&[
                i.to_string(),
                format!("{:?}", self.src_density[i]),
                format!("{:?}", self.trg_density[i]),
                format!("{:?}", self.ratio_st[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut src = Vec::new();
        let mut trg = Vec::new();
        for (expected, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Value(format!("density row {expected}: bad field {k}")))
            };
            if parse(0)? as usize != expected {
                return Err(Error::Data(format!("density rows out of order at {expected}")));
            }
            src.push(parse(1)?);
            trg.push(parse(2)?);
        }
        if src.is_empty() {
            return Err(Error::Data("density file has no rows".into()));
        }
        DensityInfo::from_densities(src, trg)
    }
}

/// Importance-weighted estimate of a target expectation from source samples:
/// `(1/n) sum_i ratio_ts_i * values_i`.
pub fn importance_weighted_mean(values: &[f64], ratio_ts: &[f64]) -> Result<f64> {
    if values.len() != ratio_ts.len() || values.is_empty() {
        return Err(Error::Data(format!("{} values for {} ratios", values.len(), ratio_ts.len())));
    }
    Ok(values.iter().zip(ratio_ts).map(|(v, r)| v * r).sum::<f64>() / values.len() as f64)
}

/// Densities for the source rows and for the target rows.
///
/// PCA is fitted on the union of both samples' `(x, a)`; one KDE is fitted on
/// the projected source points and one on the projected target points, each is
/// evaluated on both sets, and within each set the two density columns are
/// normalized separately.
pub fn build_density_info(
    source: &Dataset,
    target: &Dataset,
    cfg: &DensityConfig,
) -> Result<(DensityInfo, DensityInfo)> {
    cfg.validate()?;
    if source.d() != target.d() {
        return Err(Error::Data(format!(
            "source has {} features, target has {}",
            source.d(),
            target.d()
        )));
    }
    let src_cov = source.covariates_with_attribute();
    let trg_cov = target.covariates_with_attribute();
    let mut union = DMatrix::zeros(src_cov.nrows() + trg_cov.nrows(), src_cov.ncols());
    union.rows_mut(0, src_cov.nrows()).copy_from(&src_cov);
    union.rows_mut(src_cov.nrows(), trg_cov.nrows()).copy_from(&trg_cov);

    let q = cfg.num_components.min(union.ncols()).min(union.nrows());
    let pca = fit_pca(&union, q)?;
    let src_z = pca.project(&src_cov);
    let trg_z = pca.project(&trg_cov);

    let info_for = |eval: &DMatrix<f64>| -> Result<DensityInfo> {
        let by_src = normalize_densities(&kde_density(&src_z, eval, cfg.bandwidth), cfg.epsilon);
        let by_trg = normalize_densities(&kde_density(&trg_z, eval, cfg.bandwidth), cfg.epsilon);
        DensityInfo::from_densities(by_src, by_trg)
    };
    Ok((info_for(&src_z)?, info_for(&trg_z)?))
}
