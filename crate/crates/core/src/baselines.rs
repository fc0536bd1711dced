//! Comparison methods: logistic regression (optionally importance weighted),
//! equal-opportunity post-processing, and fair logistic regression under the
//! iid assumption. The shift-robust classifier lives in [`crate::train`].

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureMap};
use crate::error::{Error, Result};
use crate::fair::{marginals_from_labels, sigmoid, solve_p_linear, FairnessCriterion, GroupMarginals};
use crate::train::{search_mu, train_fair_robust, MuSearch, Problem, TrainConfig};

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// A fitted logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    pub theta: Vec<f64>,
    pub iterations: usize,
}

impl LrModel {
    pub fn predict_design(&self, phi: &DMatrix<f64>) -> Vec<f64> {
        (phi * DVector::from_column_slice(&self.theta)).iter().map(|&s| sigmoid(s)).collect()
    }

    pub fn predict(&self, data: &Dataset, map: &FeatureMap) -> Vec<f64> {
        self.predict_design(&map.design_matrix(data))
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `(1/n) sum w_i logloss_i + C ||theta||^2`.
fn lr_objective(phi: &DMatrix<f64>, y: &[f64], w: &[f64], c: f64, theta: &DVector<f64>) -> f64 {
    let s = phi * theta;
    let n = y.len() as f64;
    let loss: f64 = (0..y.len()).map(|i| w[i] * (log1p_exp(s[i]) - y[i] * s[i])).sum::<f64>() / n;
    loss + c * theta.norm_squared()
}

/// Newton's method with backtracking on the weighted, L2-regularized log loss.
pub fn fit_lr_design(phi: &DMatrix<f64>, y: &[f64], weights: &[f64], c: f64) -> Result<LrModel> {
    let (n, m) = phi.shape();
    if n == 0 {
        return Err(Error::Data("cannot fit logistic regression on zero rows".into()));
    }
    let nf = n as f64;
    let mut theta = DVector::<f64>::zeros(m);
    let mut obj = lr_objective(phi, y, weights, c, &theta);
    for it in 0..NEWTON_MAX_ITERS {
        let s = phi * &theta;
        let p: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
        let resid = DVector::from_iterator(n, (0..n).map(|i| weights[i] * (p[i] - y[i]) / nf));
        let grad = phi.tr_mul(&resid) + &theta * (2.0 * c);
        let gnorm = grad.amax();
        if !gnorm.is_finite() {
            return Err(Error::Numerical(format!("non-finite logistic gradient at iteration {it}")));
        }
        if gnorm <= NEWTON_TOL {
            return Ok(LrModel { theta: theta.iter().copied().collect(), iterations: it });
        }
        let mut weighted = phi.clone();
        for i in 0..n {
            let h = weights[i] * p[i] * (1.0 - p[i]) / nf;
            weighted.row_mut(i).scale_mut(h);
        }
        let mut hess = phi.tr_mul(&weighted);
        for j in 0..m {
            hess[(j, j)] += 2.0 * c + 1e-12;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess.lu().solve(&grad).ok_or_else(|| Error::Numerical("singular logistic Hessian".into()))?,
        };
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let cand_obj = lr_objective(phi, y, weights, c, &cand);
            if cand_obj <= obj - 1e-4 * t * grad.dot(&step) || t < 1e-12 {
                theta = cand;
                obj = cand_obj;
                break;
            }
            t *= 0.5;
        }
        if theta.amax() > 1e6 {
            return Err(Error::Divergence { iteration: it, norm: theta.amax() });
        }
    }
    // Newton converges quadratically; hitting the cap means a flat direction.
    let s = phi * &theta;
    let resid = DVector::from_iterator(n, (0..n).map(|i| weights[i] * (sigmoid(s[i]) - y[i]) / nf));
    let gnorm = (phi.tr_mul(&resid) + &theta * (2.0 * c)).amax();
    if gnorm > 1e-6 {
        return Err(Error::Divergence { iteration: NEWTON_MAX_ITERS, norm: gnorm });
    }
    Ok(LrModel { theta: theta.iter().copied().collect(), iterations: NEWTON_MAX_ITERS })
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) if w.len() != n => Err(Error::Data(format!("{} weights for {n} rows", w.len()))),
        Some(w) => {
            if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Value(format!("weight {bad} is not a positive finite number")));
            }
            Ok(w.to_vec())
        }
    }
}

/// Logistic regression on the source; `weights = ratio_ts` gives the
/// importance-weighted variant.
pub fn train_lr(source: &Dataset, weights: Option<&[f64]>, map: &FeatureMap, cfg: &TrainConfig) -> Result<LrModel> {
    let y: Vec<f64> = source.require_labels()?.iter().map(|&v| f64::from(v)).collect();
    let w = check_weights(weights, source.n())?;
    fit_lr_design(&map.design_matrix(source), &y, &w, cfg.l2_strength)
}

/// Held-out log loss of each candidate `C` under k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Selection {
    pub l2_strength: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Picks `C` from `grid` by `folds`-fold cross-validated plain logistic
/// regression on labeled data. Ties go to the larger `C`.
pub fn select_l2_strength(
    data: &Dataset,
    map: &FeatureMap,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<L2Selection> {
    if grid.is_empty() {
        return Err(Error::Config("empty regularization grid".into()));
    }
    let n = data.n();
    if folds < 2 || n < folds {
        return Err(Error::Size(format!("{n} rows cannot be split into {folds} folds")));
    }
    let y: Vec<f64> = data.require_labels()?.iter().map(|&v| f64::from(v)).collect();
    let phi = map.design_matrix(data);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let mut scores = Vec::with_capacity(grid.len());
    for &c in grid {
        let mut total = 0.0;
        for k in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            let phi_tr = phi.select_rows(&train);
            let y_tr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = match fit_lr_design(&phi_tr, &y_tr, &vec![1.0; train.len()], c) {
                Ok(m) => m,
                Err(Error::Divergence { .. }) => {
                    total = f64::INFINITY;
                    break;
                }
                Err(e) => return Err(e),
            };
            let probs = model.predict_design(&phi.select_rows(&test));
            total += test
                .iter()
                .zip(&probs)
                .map(|(&i, &p)| {
                    let p = p.clamp(1e-15, 1.0 - 1e-15);
                    -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
                })
                .sum::<f64>();
        }
        scores.push((c, total / n as f64));
    }
    let best = scores
        .iter()
        .copied()
        .filter(|s| s.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .ok_or_else(|| Error::Numerical("every regularization strength diverged".into()))?;
    Ok(L2Selection { l2_strength: best.0, scores })
}

/// Group-dependent randomized flip of thresholded predictions: in group `k`,
/// output 1 with probability `t[k][b]` when the base prediction is `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardtMixing {
    pub t: [[f64; 2]; 2],
}

impl HardtMixing {
    pub const IDENTITY: HardtMixing = HardtMixing { t: [[0.0, 1.0], [0.0, 1.0]] };

    pub fn positive_probability(&self, a: u8, base: u8) -> f64 {
        self.t[usize::from(a)][usize::from(base)]
    }

    /// Realizes the randomized predictor as hard 0/1 outputs.
    pub fn apply(&self, scores: &[f64], attribute: &[u8], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        scores
            .iter()
            .zip(attribute)
            .map(|(&s, &a)| {
                let prob = self.positive_probability(a, u8::from(s >= 0.5));
                let u: f64 = rng.random();
                if u < prob {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Confusion counts of a thresholded base classifier within each group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub positives: [f64; 2],
    pub negatives: [f64; 2],
    pub tpr: [f64; 2],
    pub fpr: [f64; 2],
    pub n: f64,
}

impl GroupRates {
    pub fn from_predictions(scores: &[f64], attribute: &[u8], labels: &[u8]) -> Result<Self> {
        if scores.len() != attribute.len() || scores.len() != labels.len() {
            return Err(Error::Data("scores, attributes and labels differ in length".into()));
        }
        let mut pos = [0.0; 2];
        let mut neg = [0.0; 2];
        let mut tp = [0.0; 2];
        let mut fp = [0.0; 2];
        for i in 0..scores.len() {
            let k = usize::from(attribute[i]);
            let yhat = scores[i] >= 0.5;
            if labels[i] == 1 {
                pos[k] += 1.0;
                tp[k] += f64::from(u8::from(yhat));
            } else {
                neg[k] += 1.0;
                fp[k] += f64::from(u8::from(yhat));
            }
        }
        for k in 0..2 {
            if pos[k] == 0.0 {
                return Err(Error::DegenerateGroup {
                    group: k as u8,
                    detail: "no positive examples to define a true positive rate".into(),
                });
            }
        }
        let rate = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        Ok(GroupRates {
            positives: pos,
            negatives: neg,
            tpr: [rate(tp[0], pos[0]), rate(tp[1], pos[1])],
            fpr: [rate(fp[0], neg[0]), rate(fp[1], neg[1])],
            n: scores.len() as f64,
        })
    }

    /// Derived true positive rate of group `k` under mixing `(t0, t1)`.
    pub fn derived_tpr(&self, k: usize, t0: f64, t1: f64) -> f64 {
        t1 * self.tpr[k] + t0 * (1.0 - self.tpr[k])
    }

    pub fn derived_fpr(&self, k: usize, t0: f64, t1: f64) -> f64 {
        t1 * self.fpr[k] + t0 * (1.0 - self.fpr[k])
    }

    /// Contribution of group `k` to the expected error rate.
    pub fn group_error(&self, k: usize, t0: f64, t1: f64) -> f64 {
        (self.positives[k] * (1.0 - self.derived_tpr(k, t0, t1)) + self.negatives[k] * self.derived_fpr(k, t0, t1))
            / self.n
    }

    pub fn expected_error(&self, mix: &HardtMixing) -> f64 {
        (0..2).map(|k| self.group_error(k, mix.t[k][0], mix.t[k][1])).sum()
    }

    pub fn tpr_gap(&self, mix: &HardtMixing) -> f64 {
        (self.derived_tpr(1, mix.t[1][0], mix.t[1][1]) - self.derived_tpr(0, mix.t[0][0], mix.t[0][1])).abs()
    }
}

/// Error-minimizing mixing with equal derived true positive rates.
///
/// The problem is a linear program in four box-constrained variables with one
/// equality, so an optimum sits at a vertex: three variables at a bound and
/// the fourth solved from the equality. All such vertices are enumerated.
pub fn hardt_postprocess(scores: &[f64], attribute: &[u8], labels: &[u8]) -> Result<HardtMixing> {
    let rates = GroupRates::from_predictions(scores, attribute, labels)?;
    // equality: sum_j a_j x_j = 0 with x = (t00, t01, t10, t11)
    let coef = [-(1.0 - rates.tpr[0]), -rates.tpr[0], 1.0 - rates.tpr[1], rates.tpr[1]];
    let mut candidates: Vec<[f64; 4]> = Vec::new();
    for free in 0..4 {
        if coef[free].abs() < 1e-15 {
            continue;
        }
        for mask in 0..8u32 {
            let mut x = [0.0; 4];
            let mut rest = 0.0;
            let mut bit = 0;
            for (j, xj) in x.iter_mut().enumerate() {
                if j == free {
                    continue;
                }
                *xj = f64::from((mask >> bit) & 1);
                rest += coef[j] * *xj;
                bit += 1;
            }
            let v = -rest / coef[free];
            if (-1e-12..=1.0 + 1e-12).contains(&v) {
                x[free] = v.clamp(0.0, 1.0);
                candidates.push(x);
            }
        }
    }
    for mask in 0..16u32 {
        let x: [f64; 4] = std::array::from_fn(|j| f64::from((mask >> j) & 1));
        if coef.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>().abs() <= 1e-12 {
            candidates.push(x);
        }
    }
    let identity_distance = |x: &[f64; 4]| x[0] + (1.0 - x[1]) + x[2] + (1.0 - x[3]);
    let best = candidates
        .into_iter()
        .map(|x| HardtMixing { t: [[x[0], x[1]], [x[2], x[3]]] })
        .filter(|m| rates.tpr_gap(m) <= 1e-9)
        .min_by(|a, b| {
            let (ea, eb) = (rates.expected_error(a), rates.expected_error(b));
            if (ea - eb).abs() > 1e-12 {
                ea.total_cmp(&eb)
            } else {
                let flat = |m: &HardtMixing| [m.t[0][0], m.t[0][1], m.t[1][0], m.t[1][1]];
                identity_distance(&flat(a)).total_cmp(&identity_distance(&flat(b)))
            }
        })
        .expect("the constant predictors always satisfy the constraint");
    Ok(best)
}

/// Fair logistic regression fitted with observed source labels.
#[derive(Debug, Clone)]
pub struct FairLrModel {
    pub theta: Vec<f64>,
    pub mu: f64,
    pub marginals: GroupMarginals,
    pub criterion: FairnessCriterion,
    pub search: MuSearch,
}

impl FairLrModel {
    /// Label-free prediction: the truncated predictor for a positive label,
    /// mixed with the plain logistic value by the model's own belief that the
    /// label is positive.
    pub fn predict_design(&self, phi: &DMatrix<f64>, attribute: &[u8]) -> Vec<f64> {
        predict_label_mixture(phi, attribute, &self.theta, self.mu, &self.marginals, self.criterion)
    }
}

pub fn predict_label_mixture(
    phi: &DMatrix<f64>,
    attribute: &[u8],
    theta: &[f64],
    mu: f64,
    marg: &GroupMarginals,
    crit: FairnessCriterion,
) -> Vec<f64> {
    let scores = phi * DVector::from_column_slice(theta);
    scores
        .iter()
        .zip(attribute)
        .map(|(&s, &a)| {
            let base = sigmoid(s);
            let positive = solve_p_linear(s, mu * crate::fair::fairness_weight(a, 1, 1, marg, crit));
            match crit {
                FairnessCriterion::DemographicParity => positive,
                FairnessCriterion::EqualizedOpportunity => (1.0 - base) * base + base * positive,
            }
        })
        .collect()
}

/// fairLR (or fairLR_IW with `weights = ratio_ts`): the robust solver at unit
/// ratios with the fairness term evaluated on observed source labels, and the
/// penalty weight zeroing the source violation.
pub fn train_fair_lr(
    source: &Dataset,
    weights: Option<&[f64]>,
    map: &FeatureMap,
    crit: FairnessCriterion,
    cfg: &TrainConfig,
) -> Result<FairLrModel> {
    let labels = source.require_labels()?;
    let w = weights.map(|w| check_weights(Some(w), source.n())).transpose()?;
    let marg = marginals_from_labels(source.attribute(), labels, w.as_deref(), crit)?;
    let problem = Problem::fair_iid(source, w.as_deref(), map, marg, crit, cfg.l2_strength)?;
    let search = search_mu(|mu, warm| train_fair_robust(&problem, mu, warm, cfg), cfg)?;
    Ok(FairLrModel { theta: search.state.params.theta.clone(), mu: search.mu, marginals: marg, criterion: crit, search })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a: Vec<u8> = (0..n).map(|i| u8::from(x[(i, 0)] + rng.sample::<f64, _>(StandardNormal) > 0.0)).collect();
        let y: Vec<u8> = (0..n)
            .map(|i| {
                let z = 1.5 * x[(i, 0)] - x[(i, 1)] + 0.8 * f64::from(a[i]) - 0.3;
                u8::from(rng.random::<f64>() < sigmoid(z))
            })
            .collect();
        Dataset::new(x, a, Some(y), vec!["x1".into(), "x2".into()]).unwrap()
    }

    fn cfg(c: f64) -> TrainConfig {
        TrainConfig { l2_strength: c, ..Default::default() }
    }

    #[test]
    fn unit_weights_equal_no_weights() {
        let data = synthetic(300, 1);
        let map = FeatureMap::default();
        let a = train_lr(&data, None, &map, &cfg(1e-3)).unwrap();
        let b = train_lr(&data, Some(&[1.0; 300]), &map, &cfg(1e-3)).unwrap();
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn balanced_labels_zero_feature() {
        let x = DMatrix::zeros(40, 1);
        let y = (0..40).map(|i| (i % 2) as u8).collect();
        let data = Dataset::new(x, vec![0; 40], Some(y), vec!["z".into()]).unwrap();
        let map = FeatureMap { include_attribute: false, include_intercept: true };
        let model = train_lr(&data, None, &map, &cfg(1e-3)).unwrap();
        assert!(model.theta[1].abs() < 1e-9);
        assert!(model.predict(&data, &map).iter().all(|p| (p - 0.5).abs() < 1e-9));
    }

    #[test]
    fn lr_stationarity() {
        let data = synthetic(400, 2);
        let map = FeatureMap::default();
        let w: Vec<f64> = (0..400).map(|i| 0.2 + (i % 5) as f64).collect();
        let model = train_lr(&data, Some(&w), &map, &cfg(1e-2)).unwrap();
        let phi = map.design_matrix(&data);
        let p = model.predict_design(&phi);
        let y = data.labels().unwrap();
        for j in 0..phi.ncols() {
            let g: f64 = (0..400).map(|i| w[i] * (p[i] - f64::from(y[i])) * phi[(i, j)]).sum::<f64>() / 400.0
                + 2e-2 * model.theta[j];
            assert!(g.abs() < 1e-9);
        }
    }

    #[test]
    fn bad_weights_rejected() {
        let data = synthetic(20, 3);
        let map = FeatureMap::default();
        let mut w = vec![1.0; 20];
        w[3] = 0.0;
        assert!(matches!(train_lr(&data, Some(&w), &map, &cfg(1e-3)), Err(Error::Value(_))));
    }

    #[test]
    fn cv_selects_from_grid() {
        let data = synthetic(200, 4);
        let sel = select_l2_strength(&data, &FeatureMap::default(), &crate::train::L2_GRID, 5, 0).unwrap();
        assert!(crate::train::L2_GRID.contains(&sel.l2_strength));
        assert_eq!(sel.scores.len(), 7);
        // heavy regularization flattens predictions and loses
        let worst = sel.scores.iter().find(|s| s.0 == 10.0).unwrap().1;
        let best = sel.scores.iter().find(|s| s.0 == sel.l2_strength).unwrap().1;
        assert!(best < worst);
    }

    fn grid_oracle(rates: &GroupRates) -> f64 {
        // grid one group's mixing, solve the other group's segment exactly
        let mut best = f64::INFINITY;
        for (g, o) in [(0usize, 1usize), (1, 0)] {
            for i in 0..=200 {
                for j in 0..=200 {
                    let (t0, t1) = (i as f64 / 200.0, j as f64 / 200.0);
                    let tau = rates.derived_tpr(g, t0, t1);
                    let err_g = rates.group_error(g, t0, t1);
                    // other group: t1' tpr + t0' (1 - tpr) = tau, endpoints of the segment
                    let tpr = rates.tpr[o];
                    let mut pts = Vec::new();
                    for fixed in [0.0, 1.0] {
                        if tpr > 0.0 {
                            let u = (tau - fixed * (1.0 - tpr)) / tpr;
                            if (0.0..=1.0).contains(&u) {
                                pts.push((fixed, u));
                            }
                        }
                        if tpr < 1.0 {
                            let u = (tau - fixed * tpr) / (1.0 - tpr);
                            if (0.0..=1.0).contains(&u) {
                                pts.push((u, fixed));
                            }
                        }
                    }
                    for (a0, a1) in pts {
                        best = best.min(err_g + rates.group_error(o, a0, a1));
                    }
                }
            }
        }
        best
    }

    fn scenario(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let g = u8::from(i % 3 == 0);
            let label = u8::from(rng.random::<f64>() < 0.4);
            let hit = if label == 1 { if g == 1 { 0.9 } else { 0.5 } } else { 0.2 };
            s.push(if rng.random::<f64>() < hit { 0.8 } else { 0.2 });
            a.push(g);
            y.push(label);
        }
        (s, a, y)
    }

    #[test]
    fn hardt_equalizes_and_matches_grid() {
        for seed in 0..5 {
            let (s, a, y) = scenario(seed, 600);
            let mix = hardt_postprocess(&s, &a, &y).unwrap();
            let rates = GroupRates::from_predictions(&s, &a, &y).unwrap();
            assert!(rates.tpr_gap(&mix) <= 1e-6);
            assert!(mix.t.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            let oracle = grid_oracle(&rates);
            assert!((rates.expected_error(&mix) - oracle).abs() <= 1e-3);
            assert!(rates.expected_error(&mix) <= oracle + 1e-12);
        }
    }

    #[test]
    fn hardt_identity_when_already_equal() {
        let s = vec![0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9];
        let a = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let y = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let mix = hardt_postprocess(&s, &a, &y).unwrap();
        assert_eq!(mix, HardtMixing::IDENTITY);
        let rates = GroupRates::from_predictions(&s, &a, &y).unwrap();
        assert_eq!(rates.tpr_gap(&mix), 0.0);
        assert!(rates.expected_error(&mix) >= rates.expected_error(&HardtMixing::IDENTITY) - 1e-9);
    }

    #[test]
    fn hardt_requires_positives() {
        let s = vec![0.9, 0.1, 0.9, 0.1];
        let a = vec![0, 0, 1, 1];
        let y = vec![1, 0, 0, 0];
        assert!(matches!(hardt_postprocess(&s, &a, &y), Err(Error::DegenerateGroup { group: 1, .. })));
    }

    #[test]
    fn hardt_apply_is_seeded() {
        let mix = HardtMixing { t: [[0.3, 1.0], [0.0, 0.6]] };
        let s = vec![0.2; 50];
        let a = vec![0; 50];
        assert_eq!(mix.apply(&s, &a, 7), mix.apply(&s, &a, 7));
        assert!(mix.apply(&s, &a, 7).iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn fair_lr_at_zero_mu_is_lr() {
        let data = synthetic(300, 5);
        let map = FeatureMap::default();
        let c = cfg(1e-2);
        let lr = train_lr(&data, None, &map, &c).unwrap();
        let marg =
            marginals_from_labels(data.attribute(), data.labels().unwrap(), None, FairnessCriterion::EqualizedOpportunity)
                .unwrap();
        let problem =
            Problem::fair_iid(&data, None, &map, marg, FairnessCriterion::EqualizedOpportunity, 1e-2).unwrap();
        let state = train_fair_robust(&problem, 0.0, None, &TrainConfig { max_iters: 20000, ..c.clone() }).unwrap();
        let p_lr = lr.predict(&data, &map);
        for (pq, pl) in state.source_pairs.iter().zip(&p_lr) {
            assert!((pq.p - pl).abs() <= 1e-3);
        }
    }

    #[test]
    fn fair_lr_degenerate_group() {
        let mut data = synthetic(100, 6);
        let y: Vec<u8> = data.attribute().iter().map(|&a| if a == 1 { 0 } else { 1 }).collect();
        data = data.split_labels().0.with_labels(y).unwrap();
        let res = train_fair_lr(&data, None, &FeatureMap::default(), FairnessCriterion::EqualizedOpportunity, &cfg(1e-2));
        assert!(matches!(res, Err(Error::DegenerateGroup { .. })));
    }

    #[test]
    fn fair_lr_zeroes_source_violation() {
        let data = synthetic(400, 7);
        let map = FeatureMap::default();
        let model =
            train_fair_lr(&data, None, &map, FairnessCriterion::EqualizedOpportunity, &cfg(1e-2)).unwrap();
        assert!(model.search.bracketed);
        assert!(model.search.violation.abs() <= 1e-3);
        // the unconstrained fit favors group 1, so the penalty pushes against it
        assert!(model.mu > 0.0);
    }

    proptest! {
        #[test]
        fn hardt_never_widens_gap(seed in 0u64..200, n in 30usize..200) {
            let (s, a, y) = scenario(seed, n);
            if let Ok(rates) = GroupRates::from_predictions(&s, &a, &y) {
                let mix = hardt_postprocess(&s, &a, &y).unwrap();
                prop_assert!(rates.tpr_gap(&mix) <= rates.tpr_gap(&HardtMixing::IDENTITY) + 1e-12);
                prop_assert!(rates.tpr_gap(&mix) <= 1e-6);
            }
        }
    }
}
