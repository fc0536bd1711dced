//! Synthetic data with a known labeling rule, for tests and benchmarks.
//!
//! Covariates come from a mixture of two 2D Gaussians, one per protected
//! group, and labels from a fixed logistic rule in `(x, a)`. Shifting the
//! component means moves `P(x, a)` while `P(y | x, a)` stays put, which is
//! covariate shift by construction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::fair::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    /// Probability of the privileged group `a = 1`.
    pub group1_fraction: f64,
    /// Component mean of each group.
    pub means: [[f64; 2]; 2],
    pub std: f64,
    /// Logistic rule `w . x + attribute_coef * a + bias`.
    pub weights: [f64; 2],
    pub attribute_coef: f64,
    pub bias: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        GaussianMixture {
            group1_fraction: 0.5,
            means: [[-0.5, 0.0], [0.5, 0.5]],
            std: 1.0,
            weights: [1.5, -1.0],
            attribute_coef: 1.0,
            bias: -0.3,
        }
    }
}

impl GaussianMixture {
    /// The same labeling rule with both component means moved by `offset`.
    pub fn shifted(&self, offset: [f64; 2]) -> Self {
        let mut s = self.clone();
        for m in &mut s.means {
            m[0] += offset[0];
            m[1] += offset[1];
        }
        s
    }

    pub fn label_probability(&self, x: [f64; 2], a: u8) -> f64 {
        sigmoid(self.weights[0] * x[0] + self.weights[1] * x[1] + self.attribute_coef * f64::from(a) + self.bias)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let g = u8::from(rng.random::<f64>() < self.group1_fraction);
            let mean = self.means[usize::from(g)];
            let xi = [
                mean[0] + self.std * rng.sample::<f64, _>(StandardNormal),
                mean[1] + self.std * rng.sample::<f64, _>(StandardNormal),
            ];
            x[(i, 0)] = xi[0];
            x[(i, 1)] = xi[1];
            a.push(g);
            y.push(u8::from(rng.random::<f64>() < self.label_probability(xi, g)));
        }
        Dataset::new(x, a, Some(y), vec!["x1".into(), "x2".into()]).expect("consistent shapes")
    }
}

/// A labeled source drawn with means offset by `offset` along the first axis,
/// and a labeled target from the unshifted mixture.
pub fn shifted_pair(mix: &GaussianMixture, n_source: usize, n_target: usize, offset: f64, seed: u64) -> (Dataset, Dataset) {
    let source = mix.shifted([offset, 0.0]).sample(n_source, seed);
    let target = mix.sample(n_target, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    (source, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_moves_covariates_only() {
        let mix = GaussianMixture::default();
        let (src, trg) = shifted_pair(&mix, 4000, 4000, 1.0, 3);
        let mean0 = |d: &Dataset| d.features().column(0).mean();
        assert!((mean0(&src) - mean0(&trg) - 1.0).abs() < 0.1);
        let moved = mix.shifted([1.0, 0.0]);
        assert_eq!(moved.label_probability([0.3, -0.2], 1), mix.label_probability([0.3, -0.2], 1));
    }

    #[test]
    fn seeded() {
        let mix = GaussianMixture::default();
        assert_eq!(mix.sample(50, 1), mix.sample(50, 1));
        assert_ne!(mix.sample(50, 1), mix.sample(50, 2));
    }
}
