//! Fitting any of the compared methods on one split, and the JSON document a
//! fitted model is stored as.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{hardt_postprocess, predict_label_mixture, train_fair_lr, train_lr, HardtMixing, LrModel};
use crate::data::{Dataset, FeatureMap};
use crate::density::{DensityConfig, DensityInfo};
use crate::error::{Error, Result};
use crate::fair::{
    estimate_group_marginals, fairness_weight, sigmoid, solve_p_linear, solve_p_offset, FairnessCriterion,
    GroupMarginals, PenaltyForm,
};
use crate::train::{search_mu, train_fair_robust, train_rba, Problem, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lr,
    Rba,
    LrIw,
    Hardt,
    FairLr,
    FairLrIw,
    FairRobustShift,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Lr,
        Method::Rba,
        Method::LrIw,
        Method::Hardt,
        Method::FairLr,
        Method::FairLrIw,
        Method::FairRobustShift,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lr => "lr",
            Method::Rba => "rba",
            Method::LrIw => "lr_iw",
            Method::Hardt => "hardt",
            Method::FairLr => "fair_lr",
            Method::FairLrIw => "fair_lr_iw",
            Method::FairRobustShift => "fair_robust_shift",
        }
    }

    /// Whether predictions need the rows' `P_src/P_trg` ratios.
    pub fn needs_ratios(&self) -> bool {
        matches!(self, Method::Rba | Method::FairRobustShift)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// A fitted model of any method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub method: Method,
    pub feature_map: FeatureMap,
    pub theta: Vec<f64>,
    pub lambda: [f64; 2],
    pub mu: f64,
    pub criterion: Option<FairnessCriterion>,
    pub marginals: Option<GroupMarginals>,
    pub l2_strength: f64,
    pub density_fingerprint: Option<String>,
    pub converged: bool,
    pub iterations: usize,
    /// False when the penalty search found no sign change.
    pub mu_bracketed: Option<bool>,
    pub violation: Option<f64>,
    pub hardt: Option<HardtMixing>,
    /// Seed realizing the randomized post-processed predictions.
    pub prediction_seed: u64,
}

impl ModelDocument {
    fn base(method: Method, map: &FeatureMap, theta: Vec<f64>, cfg: &TrainConfig) -> Self {
        ModelDocument {
            format_version: FORMAT_VERSION,
            method,
            feature_map: *map,
            theta,
            lambda: [0.0; 2],
            mu: 0.0,
            criterion: None,
            marginals: None,
            l2_strength: cfg.l2_strength,
            density_fingerprint: None,
            converged: true,
            iterations: 0,
            mu_bracketed: None,
            violation: None,
            hardt: None,
            prediction_seed: cfg.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported model format version {}", doc.format_version)));
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelDocument::from_json(&std::fs::read_to_string(path)?)
    }

    fn fairness(&self) -> Result<(FairnessCriterion, GroupMarginals)> {
        match (self.criterion, self.marginals) {
            (Some(c), Some(m)) => Ok((c, m)),
            _ => Err(Error::Config(format!("{} model is missing its fairness settings", self.method))),
        }
    }

    /// Probability (or, after post-processing, hard 0/1 output) of `y = 1`
    /// for every row. `ratio_st` is required for methods using density ratios.
    pub fn predict(&self, data: &Dataset, ratio_st: Option<&[f64]>) -> Result<Vec<f64>> {
        let phi = self.feature_map.design_matrix(data);
        if phi.ncols() != self.theta.len() {
            return Err(Error::Data(format!(
                "model expects {} features, data gives {}",
                self.theta.len(),
                phi.ncols()
            )));
        }
        let scores = &phi * DVector::from_column_slice(&self.theta);
        let ratios = if self.method.needs_ratios() {
            let r = ratio_st.ok_or_else(|| Error::Config(format!("{} predictions need density ratios", self.method)))?;
            if r.len() != data.n() {
                return Err(Error::Data(format!("{} ratios for {} rows", r.len(), data.n())));
            }
            Some(r)
        } else {
            None
        };
        match self.method {
            Method::Lr | Method::LrIw => Ok(scores.iter().map(|&s| sigmoid(s)).collect()),
            Method::Rba => {
                let r = ratios.expect("checked");
                Ok(scores.iter().zip(r).map(|(s, r)| sigmoid(r * s)).collect())
            }
            Method::Hardt => {
                let mix = self.hardt.ok_or_else(|| Error::Config("post-processing model lacks its mixing".into()))?;
                let base: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
                Ok(mix.apply(&base, data.attribute(), self.prediction_seed))
            }
            Method::FairLr | Method::FairLrIw => {
                let (crit, marg) = self.fairness()?;
                Ok(predict_label_mixture(&phi, data.attribute(), &self.theta, self.mu, &marg, crit))
            }
            Method::FairRobustShift => {
                let (crit, marg) = self.fairness()?;
                let r = ratios.expect("checked");
                let lambda_active = crit.uses_group_constraints();
                Ok((0..data.n())
                    .map(|i| {
                        let a = data.attribute()[i];
                        let lam = if lambda_active { self.lambda[usize::from(a)] } else { 0.0 };
                        let offset = r[i] * scores[i] + lam;
                        let muf = self.mu * fairness_weight(a, 1, 1, &marg, crit);
                        match crit.penalty_form() {
                            PenaltyForm::Adversarial => solve_p_offset(offset, muf, 1e-12),
                            PenaltyForm::Linear => solve_p_linear(offset, muf),
                        }
                    })
                    .collect())
            }
        }
    }
}

/// Inputs shared by every method on one split.
pub struct FitContext<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub source_density: &'a DensityInfo,
    pub target_density: &'a DensityInfo,
    pub density_config: &'a DensityConfig,
    pub map: FeatureMap,
    pub criterion: FairnessCriterion,
    pub train: TrainConfig,
}

pub fn fit_method(method: Method, ctx: &FitContext<'_>) -> Result<ModelDocument> {
    if ctx.target.labels().is_some() {
        return Err(Error::Data("target rows passed to training must be unlabeled".into()));
    }
    let cfg = &ctx.train;
    let clip = &ctx.density_config.ratio_clip;
    let fingerprint = Some(ctx.density_config.fingerprint());
    let lr_doc = |method: Method, model: LrModel| {
        let mut doc = ModelDocument::base(method, &ctx.map, model.theta, cfg);
        doc.iterations = model.iterations;
        doc
    };
    let doc = match method {
        Method::Lr => lr_doc(method, train_lr(ctx.source, None, &ctx.map, cfg)?),
        Method::LrIw => {
            let w = ctx.source_density.clipped_ratio_ts(clip);
            let mut doc = lr_doc(method, train_lr(ctx.source, Some(&w), &ctx.map, cfg)?);
            doc.density_fingerprint = fingerprint;
            doc
        }
        Method::Hardt => {
            let lr = train_lr(ctx.source, None, &ctx.map, cfg)?;
            let scores = lr.predict(ctx.source, &ctx.map);
            let mix = hardt_postprocess(&scores, ctx.source.attribute(), ctx.source.require_labels()?)?;
            let mut doc = lr_doc(method, lr);
            doc.hardt = Some(mix);
            doc
        }
        Method::Rba => {
            let model = train_rba(ctx.source, &ctx.source_density.clipped_ratio_st(clip), &ctx.map, cfg)?;
            let mut doc = ModelDocument::base(method, &ctx.map, model.theta, cfg);
            doc.converged = model.state.converged;
            doc.iterations = model.state.iterations_used;
            doc.density_fingerprint = fingerprint;
            doc
        }
        Method::FairLr | Method::FairLrIw => {
            let w = (method == Method::FairLrIw).then(|| ctx.source_density.clipped_ratio_ts(clip));
            let model = train_fair_lr(ctx.source, w.as_deref(), &ctx.map, ctx.criterion, cfg)?;
            let mut doc = ModelDocument::base(method, &ctx.map, model.theta, cfg);
            doc.mu = model.mu;
            doc.criterion = Some(ctx.criterion);
            doc.marginals = Some(model.marginals);
            doc.converged = model.search.state.converged;
            doc.iterations = model.search.state.iterations_used;
            doc.mu_bracketed = Some(model.search.bracketed);
            doc.violation = Some(model.search.violation);
            if w.is_some() {
                doc.density_fingerprint = fingerprint;
            }
            doc
        }
        Method::FairRobustShift => {
            let src_ratio = ctx.source_density.clipped_ratio_st(clip);
            let trg_ratio = ctx.target_density.clipped_ratio_st(clip);
            let rba = train_rba(ctx.source, &src_ratio, &ctx.map, cfg)?;
            let probe = rba.probe_dataset(ctx.target, &ctx.map, &trg_ratio);
            let marg = estimate_group_marginals(ctx.target.attribute(), &probe, ctx.criterion)?;
            let problem = Problem::fair_robust(
                ctx.source,
                src_ratio,
                ctx.target,
                trg_ratio,
                &ctx.map,
                marg,
                ctx.criterion,
                cfg.l2_strength,
            )?;
            let search = search_mu(|mu, warm| train_fair_robust(&problem, mu, warm, cfg), cfg)?;
            let state = &search.state;
            let mut doc = ModelDocument::base(method, &ctx.map, state.params.theta.clone(), cfg);
            doc.lambda = state.params.lambda;
            doc.mu = search.mu;
            doc.criterion = Some(ctx.criterion);
            doc.marginals = Some(marg);
            doc.converged = state.converged;
            doc.iterations = state.iterations_used;
            doc.mu_bracketed = Some(search.bracketed);
            doc.violation = Some(search.violation);
            doc.density_fingerprint = fingerprint;
            doc
        }
    };
    Ok(doc)
}
