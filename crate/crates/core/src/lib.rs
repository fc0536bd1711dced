//! Fair robust log-loss classification under covariate shift.
//!
//! The crate is organized along the pipeline:
//!
//! - [`data`]: CSV ingestion, encoding, z-scoring and the feature function.
//! - [`density`]: PCA + KDE density ratios between source and target samples.
//! - [`shift`]: biased source/target sampling with sealed target labels.
//! - [`fair`]: the per-row predictor/adversary equilibrium and fairness weights.
//! - [`train`]: dual gradient training and the fairness-penalty search.
//! - [`baselines`]: logistic regression (plain and importance weighted),
//!   post-processing for equal true positive rates, and fair logistic regression.
//! - [`eval`]: metrics, confidence intervals and the experiment runner.

pub mod baselines;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod fair;
pub mod model;
pub mod shift;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
