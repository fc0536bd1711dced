//! Per-row equilibrium of the fair robust game.
//!
//! For a row with density ratio `r = P_src/P_trg`, score `dot = theta . phi(x, 1)`,
//! active group multiplier `lam` and penalty coefficient `muf = mu * f(a, 1, 1)`,
//! the predictor probability `p = P(y=1|x,a)` is the root of
//!
//! ```text
//! h(p) = ln((1 - p) / p) + muf * p + r * dot + lam
//! ```
//!
//! on `0 < p <= 1/muf` when `muf > 1` and on `0 < p < 1` otherwise. If `h` is
//! still positive at the upper end of that domain the solution sits on the
//! boundary, where the adversary's probability is exactly one. Given `p`, the
//! adversary's probability of `y = 1` is
//!
//! ```text
//! q = p / (1 - muf * p + muf * p^2)
//! ```
//!
//! When the fairness penalty does not involve the adversary (demographic parity,
//! or equal opportunity with observed labels) the penalty is linear in `p`; then
//! `p` is the logistic value truncated at the point where `q` reaches 0 or 1,
//! and `q = p + muf * p * (1 - p)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this estimated mass a group is considered empty.
pub const MIN_GROUP_MASS: f64 = 1e-6;

const MAX_BISECTION_STEPS: usize = 100;
const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessCriterion {
    EqualizedOpportunity,
    DemographicParity,
}

impl FairnessCriterion {
    /// Group selector `g_k(a, y)`.
    pub fn selects(&self, k: u8, a: u8, y: u8) -> bool {
        match self {
            FairnessCriterion::EqualizedOpportunity => a == k && y == 1,
            FairnessCriterion::DemographicParity => a == k,
        }
    }

    /// How the penalty enters the per-row equilibrium.
    pub fn penalty_form(&self) -> PenaltyForm {
        match self {
            FairnessCriterion::EqualizedOpportunity => PenaltyForm::Adversarial,
            FairnessCriterion::DemographicParity => PenaltyForm::Linear,
        }
    }

    /// Whether the group-marginal constraints on the adversary are in play.
    pub fn uses_group_constraints(&self) -> bool {
        matches!(self, FairnessCriterion::EqualizedOpportunity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// Penalty weighted by the adversary's label distribution.
    Adversarial,
    /// Penalty linear in the predictor.
    Linear,
}

/// Estimated target mass of each fairness group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMarginals {
    pub g_tilde_0: f64,
    pub g_tilde_1: f64,
}

impl GroupMarginals {
    pub fn new(g_tilde_0: f64, g_tilde_1: f64) -> Result<Self> {
        for (k, g) in [(0u8, g_tilde_0), (1u8, g_tilde_1)] {
            if !(g.is_finite() && g >= MIN_GROUP_MASS) {
                return Err(Error::DegenerateGroup {
                    group: k,
                    detail: format!("estimated mass {g:.3e} is below {MIN_GROUP_MASS:e}"),
                });
            }
        }
        Ok(GroupMarginals { g_tilde_0, g_tilde_1 })
    }

    pub fn get(&self, k: u8) -> f64 {
        if k == 0 {
            self.g_tilde_0
        } else {
            self.g_tilde_1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualParams {
    pub theta: Vec<f64>,
    pub lambda: [f64; 2],
    pub mu: f64,
}

impl DualParams {
    pub fn zeros(m: usize) -> Self {
        DualParams { theta: vec![0.0; m], lambda: [0.0; 2], mu: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.lambda).all(|v| v.is_finite()) && self.mu.is_finite()
    }
}

/// Predictor and adversary probabilities of `y = 1` for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub p: f64,
    pub q: f64,
    /// `ln(p / (1 - p))` as solved. Near `p = 1` the rounded `p` no longer
    /// pins down the logit, so residual checks use this instead.
    pub logit: f64,
}

/// The weighting `f(a, y, yhat)`: `1/g1` for the privileged group's selected
/// cell, `-1/g0` for the other group's, zero elsewhere.
pub fn fairness_weight(a: u8, y: u8, yhat: u8, marg: &GroupMarginals, crit: FairnessCriterion) -> f64 {
    if yhat != 1 {
        0.0
    } else if crit.selects(1, a, y) {
        1.0 / marg.g_tilde_1
    } else if crit.selects(0, a, y) {
        -1.0 / marg.g_tilde_0
    } else {
        0.0
    }
}

/// Group marginals on the target from a fairness-agnostic probe of
/// `P(y=1|x,a)`. For demographic parity the probe is not needed.
pub fn estimate_group_marginals(
    attribute: &[u8],
    probe: &[f64],
    crit: FairnessCriterion,
) -> Result<GroupMarginals> {
    let m = attribute.len();
    if m == 0 {
        return Err(Error::Data("cannot estimate group marginals from zero rows".into()));
    }
    let mut mass = [0.0f64; 2];
    for (i, &a) in attribute.iter().enumerate() {
        let w = match crit {
            FairnessCriterion::EqualizedOpportunity => {
                let p = probe[i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Value(format!("probe value {p} at row {i} is not a probability")));
                }
                p
            }
            FairnessCriterion::DemographicParity => 1.0,
        };
        mass[usize::from(a)] += w;
    }
    GroupMarginals::new(mass[0] / m as f64, mass[1] / m as f64)
}

/// Group marginals from observed labels, optionally importance weighted.
pub fn marginals_from_labels(
    attribute: &[u8],
    labels: &[u8],
    weights: Option<&[f64]>,
    crit: FairnessCriterion,
) -> Result<GroupMarginals> {
    let mut mass = [0.0f64; 2];
    let mut total = 0.0;
    for i in 0..attribute.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        total += w;
        for k in 0..2u8 {
            if crit.selects(k, attribute[i], labels[i]) {
                mass[usize::from(k)] += w;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Data("no rows to count group marginals".into()));
    }
    GroupMarginals::new(mass[0] / total, mass[1] / total)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Upper end of the admissible domain for `p`.
pub fn domain_upper(muf: f64) -> f64 {
    if muf > 1.0 {
        1.0 / muf
    } else {
        1.0
    }
}

/// The first-order residual `h(p)`, with `offset = r * dot + lam`.
pub fn theorem_residual(p: f64, offset: f64, muf: f64) -> f64 {
    ((1.0 - p) / p).ln() + muf * p + offset
}

/// Root of `h` on the admissible domain, or the domain's upper end when `h`
/// has no interior root.
///
/// Bisection runs on the logit `z = ln(p / (1 - p))`, where `h` reads
/// `-z + muf * sigmoid(z) + offset` and is non-increasing with slope bounded by
/// `1 + |muf|/4`; the root is bracketed by `offset + [min(0, muf), max(0, muf)]`.
pub fn solve_p(r: f64, dot: f64, lam: f64, muf: f64, tol: f64) -> f64 {
    solve_p_offset(r * dot + lam, muf, tol)
}

pub(crate) fn solve_p_offset(offset: f64, muf: f64, tol: f64) -> f64 {
    solve_logit_offset(offset, muf, tol).0
}

/// `(p, logit)` at the root of `h`; on the boundary `p = 1/muf` exactly.
pub(crate) fn solve_logit_offset(offset: f64, muf: f64, tol: f64) -> (f64, f64) {
    let h = |z: f64| -z + muf * sigmoid(z) + offset;
    let mut lo = offset + muf.min(0.0);
    let mut hi = offset + muf.max(0.0);
    if muf > 1.0 {
        let z_ub = -(muf - 1.0).ln();
        if h(z_ub) > 0.0 {
            return (1.0 / muf, z_ub);
        }
        hi = hi.min(z_ub);
    }
    if hi - lo <= tol {
        let z = 0.5 * (lo + hi);
        return (sigmoid(z), z);
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTION_STEPS {
        mid = 0.5 * (lo + hi);
        let v = h(mid);
        if v == 0.0 || hi - lo <= tol {
            break;
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (sigmoid(mid), mid)
}

/// Predictor value and its logit under the linear penalty.
pub(crate) fn solve_logit_linear(offset: f64, muf: f64) -> (f64, f64) {
    let p = solve_p_linear(offset, muf);
    if p == sigmoid(offset) {
        (p, offset)
    } else {
        (p, (p / (1.0 - p)).ln())
    }
}

/// Adversary probability of `y = 1` at equilibrium with predictor value `p`.
pub fn compute_q(p: f64, muf: f64) -> Result<f64> {
    let ub = domain_upper(muf);
    // Closed at both ends: the logistic map rounds to exactly 0 or 1 for large scores.
    if !(p >= 0.0 && p <= ub * (1.0 + ROUNDING_SLACK)) {
        return Err(Error::Domain(format!("p = {p} outside the admissible domain (0, {ub}] for muf = {muf}")));
    }
    let q = p / (1.0 - muf * p + muf * p * p);
    clamp_probability(q)
}

/// Linear-penalty equilibrium: the logistic value truncated where `q` hits 0 or 1.
pub fn solve_p_linear(offset: f64, muf: f64) -> f64 {
    let s = sigmoid(offset);
    if muf > 1.0 {
        s.min(1.0 / muf)
    } else if muf < -1.0 {
        s.max(1.0 + 1.0 / muf)
    } else {
        s
    }
}

pub fn compute_q_linear(p: f64, muf: f64) -> Result<f64> {
    clamp_probability(p + muf * p * (1.0 - p))
}

fn clamp_probability(q: f64) -> Result<f64> {
    if !q.is_finite() || q < -ROUNDING_SLACK || q > 1.0 + ROUNDING_SLACK {
        return Err(Error::Domain(format!("adversary probability {q} is outside [0, 1]")));
    }
    Ok(q.clamp(0.0, 1.0))
}

/// [`check_row`] for a solved row, with the interior residual evaluated at the
/// solved logit rather than at the rounded `p`.
pub fn check_pair(pair: &PredictionPair, offset: f64, muf: f64, form: PenaltyForm, tol: f64) -> bool {
    let on_boundary = match form {
        PenaltyForm::Adversarial => muf > 1.0 && pair.p == domain_upper(muf),
        PenaltyForm::Linear => (muf > 1.0 && pair.p == 1.0 / muf) || (muf < -1.0 && pair.p == 1.0 + 1.0 / muf),
    };
    if on_boundary {
        return check_row(pair.p, offset, muf, form, tol);
    }
    let z = pair.logit;
    let residual = match form {
        PenaltyForm::Adversarial => -z + muf * sigmoid(z) + offset,
        PenaltyForm::Linear => offset - z,
    };
    residual.abs() <= tol && sigmoid(z) == pair.p
}

/// Whether a solved row satisfies its optimality condition: either the residual
/// is within `tol` or the row sits on the domain boundary with the residual
/// still positive there.
pub fn check_row(p: f64, offset: f64, muf: f64, form: PenaltyForm, tol: f64) -> bool {
    match form {
        PenaltyForm::Adversarial => {
            let ub = domain_upper(muf);
            if muf > 1.0 && p == ub {
                theorem_residual(ub, offset, muf) > 0.0
            } else {
                theorem_residual(p, offset, muf).abs() <= tol
            }
        }
        PenaltyForm::Linear => {
            let s = sigmoid(offset);
            if muf > 1.0 && p == 1.0 / muf {
                s >= p
            } else if muf < -1.0 && p == 1.0 + 1.0 / muf {
                s <= p
            } else {
                theorem_residual(p, offset, 0.0).abs() <= tol
            }
        }
    }
}

/// Expected fairness violation `E_{P_trg Q P}[f(A, Y', Yhat)]` on the target
/// rows. With the adversarial form only the `(y' = 1, yhat = 1)` cell carries
/// weight; for demographic parity the label expectation drops out.
pub fn expected_violation(
    attribute: &[u8],
    p: &[f64],
    q: &[f64],
    marg: &GroupMarginals,
    crit: FairnessCriterion,
) -> f64 {
    let m = attribute.len() as f64;
    let total: f64 = attribute
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = fairness_weight(a, 1, 1, marg, crit);
            match crit {
                FairnessCriterion::EqualizedOpportunity => q[i] * p[i] * f,
                FairnessCriterion::DemographicParity => p[i] * f,
            }
        })
        .sum();
    total / m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EO: FairnessCriterion = FairnessCriterion::EqualizedOpportunity;
    const DP: FairnessCriterion = FairnessCriterion::DemographicParity;

    /// Independent oracle: plain bisection of h in probability space.
    fn bisect_p(offset: f64, muf: f64, lo: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if theorem_residual(mid, offset, muf) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn weight_cases() {
        let marg = GroupMarginals::new(0.2, 0.35).unwrap();
        assert!((fairness_weight(1, 1, 1, &marg, EO) - 1.0 / 0.35).abs() < 1e-15);
        assert!((fairness_weight(1, 1, 1, &marg, EO) - 2.8571).abs() < 1e-4);
        assert_eq!(fairness_weight(0, 1, 1, &marg, EO), -5.0);
        for (a, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            assert_eq!(fairness_weight(a, y, 0, &marg, EO), 0.0);
        }
        assert_eq!(fairness_weight(1, 0, 1, &marg, EO), 0.0);
        assert_eq!(fairness_weight(0, 0, 1, &marg, EO), 0.0);
        // demographic parity ignores y
        assert_eq!(fairness_weight(0, 0, 1, &marg, DP), -5.0);
    }

    #[test]
    fn weights_are_mass_balanced() {
        let marg = GroupMarginals::new(0.13, 0.61).unwrap();
        for crit in [EO, DP] {
            let s = marg.get(1) * fairness_weight(1, 1, 1, &marg, crit)
                + marg.get(0) * fairness_weight(0, 1, 1, &marg, crit);
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn marginals_from_probe() {
        let a = [1, 1, 0, 0];
        let probe = [0.8, 0.6, 0.5, 0.3];
        let g = estimate_group_marginals(&a, &probe, EO).unwrap();
        assert!((g.g_tilde_1 - 0.35).abs() < 1e-15);
        assert!((g.g_tilde_0 - 0.20).abs() < 1e-15);
        let g = estimate_group_marginals(&a, &probe, DP).unwrap();
        assert_eq!((g.g_tilde_0, g.g_tilde_1), (0.5, 0.5));
        let g = estimate_group_marginals(&[1, 0, 0, 0], &[1.0; 4], EO).unwrap();
        assert_eq!((g.g_tilde_0, g.g_tilde_1), (0.75, 0.25));
    }

    #[test]
    fn empty_group_is_degenerate() {
        let err = estimate_group_marginals(&[1, 1, 1], &[0.5; 3], EO).unwrap_err();
        assert!(matches!(err, Error::DegenerateGroup { group: 0, .. }));
        let err = estimate_group_marginals(&[1, 0], &[0.5, 0.0], EO).unwrap_err();
        assert!(matches!(err, Error::DegenerateGroup { group: 0, .. }));
    }

    #[test]
    fn marginals_from_observed_labels() {
        let g = marginals_from_labels(&[1, 1, 0, 0], &[1, 0, 1, 1], None, EO).unwrap();
        assert_eq!((g.g_tilde_0, g.g_tilde_1), (0.5, 0.25));
        let g = marginals_from_labels(&[1, 1, 0, 0], &[1, 0, 1, 1], Some(&[2.0, 1.0, 1.0, 0.0]), EO).unwrap();
        assert_eq!((g.g_tilde_0, g.g_tilde_1), (0.25, 0.5));
        assert!(marginals_from_labels(&[1, 1], &[1, 1], None, EO).is_err());
    }

    #[test]
    fn solve_symmetric_logit() {
        assert_eq!(solve_p(1.0, 0.0, 0.0, 0.0, 1e-12), 0.5);
    }

    #[test]
    fn solve_logistic_reduction() {
        let p = solve_p(1.0, 3f64.ln(), 0.0, 0.0, 1e-12);
        assert!((p - 0.75).abs() < 1e-12);
        let p = solve_p(2.0, 0.5 * 3f64.ln() - 0.25, 0.5, 0.0, 1e-12);
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn solve_clamps_to_domain_boundary() {
        // muf = 2: domain is (0, 0.5] and h(0.5) = 1 > 0
        assert_eq!(solve_p(1.0, 0.0, 0.0, 2.0, 1e-12), 0.5);
        assert!(theorem_residual(0.5, 0.0, 2.0) > 0.0);
        // the unrestricted root of the same h lies outside the domain
        let free_root = bisect_p(0.0, 2.0, 1e-15, 1.0 - 1e-15);
        assert!((free_root - 0.8439).abs() < 1e-4, "{free_root}");
        assert!(theorem_residual(free_root, 0.0, 2.0).abs() < 1e-9);
    }

    #[test]
    fn q_examples() {
        assert_eq!(compute_q(0.37, 0.0).unwrap(), 0.37);
        assert_eq!(compute_q(0.5, 2.0).unwrap(), 1.0);
        assert!((compute_q(0.5, -1.0).unwrap() - 0.4).abs() < 1e-15);
        for muf in [1.5f64, 3.0, 7.25, 40.0] {
            // p = 1/muf makes the denominator equal to p
            let p = 1.0 / muf;
            let den = 1.0 - muf * p + muf * p * p;
            assert!((den - p).abs() < 1e-15);
            assert!((compute_q(p, muf).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn q_outside_domain_errors() {
        assert!(matches!(compute_q(0.6, 2.0), Err(Error::Domain(_))));
        assert!(matches!(compute_q(-0.1, 0.5), Err(Error::Domain(_))));
        assert!(matches!(compute_q(1.1, 0.5), Err(Error::Domain(_))));
        assert_eq!(compute_q(1.0, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn linear_truncation() {
        assert_eq!(solve_p_linear(0.0, 0.0), 0.5);
        assert_eq!(solve_p_linear(3.0, 4.0), 0.25);
        assert!((compute_q_linear(0.25, 4.0).unwrap() - 1.0).abs() < 1e-15);
        let p = solve_p_linear(-3.0, -4.0);
        assert_eq!(p, 0.75);
        assert!(compute_q_linear(p, -4.0).unwrap().abs() < 1e-15);
        assert!(check_row(0.25, 3.0, 4.0, PenaltyForm::Linear, 1e-8));
    }

    #[test]
    fn violation_hand_expansion() {
        let marg = GroupMarginals::new(0.5, 0.5).unwrap();
        let v = expected_violation(&[1, 0], &[0.9, 0.6], &[0.8, 0.5], &marg, EO);
        assert!((v - 0.42).abs() < 1e-12);
        let v = expected_violation(&[1, 0], &[0.9, 0.6], &[0.0, 0.0], &marg, EO);
        assert_eq!(v, 0.0);
        let v = expected_violation(&[1, 0, 1, 0], &[0.5, 0.5, 0.2, 0.2], &[0.4, 0.4, 0.3, 0.3], &marg, EO);
        assert!(v.abs() < 1e-15);
        let v = expected_violation(&[1, 0], &[0.9, 0.6], &[0.0, 0.0], &marg, DP);
        assert!((v - 0.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn root_residual_or_boundary(r in 0.001f64..1000.0, dot in -5.0f64..5.0, lam in -5.0f64..5.0, muf in -20.0f64..20.0) {
            let offset = r * dot + lam;
            let p = solve_p(r, dot, lam, muf, 1e-12);
            prop_assert!(p >= 0.0 && p <= domain_upper(muf));
            if p > 1e-6 && p < 1.0 - 1e-6 {
                prop_assert!(check_row(p, offset, muf, PenaltyForm::Adversarial, 1e-8),
                    "residual {}", theorem_residual(p, offset, muf));
            }
            let q = compute_q(p, muf).unwrap();
            prop_assert!((0.0..=1.0).contains(&q));
            prop_assert_eq!(compute_q(p, muf).unwrap(), q);
        }

        #[test]
        fn residual_monotone_on_domain(muf in -20.0f64..20.0, offset in -5.0f64..5.0, seed in proptest::collection::vec(0.0f64..1.0, 100)) {
            let ub = domain_upper(muf);
            let mut pts: Vec<f64> = seed.iter().map(|u| (u * ub).max(1e-9).min(ub - 1e-9)).collect();
            pts.sort_by(f64::total_cmp);
            for w in pts.windows(2) {
                prop_assert!(theorem_residual(w[1], offset, muf) <= theorem_residual(w[0], offset, muf) + 1e-12);
                let slope = -1.0 / (w[0] * (1.0 - w[0])) + muf;
                prop_assert!(slope <= 1e-12);
            }
        }

        #[test]
        fn zero_penalty_is_logistic(offset in -30.0f64..30.0) {
            let p = solve_p_offset(offset, 0.0, 1e-12);
            prop_assert!((p - 1.0 / (1.0 + (-offset).exp())).abs() < 1e-10);
            prop_assert_eq!(compute_q(p, 0.0).unwrap(), p);
        }

        #[test]
        fn matches_probability_space_oracle(offset in -6.0f64..6.0, muf in -10.0f64..10.0) {
            let ub = domain_upper(muf);
            let p = solve_p_offset(offset, muf, 1e-12);
            if theorem_residual(ub.min(1.0 - 1e-15), offset, muf) > 0.0 {
                prop_assert_eq!(p, ub);
            } else {
                let oracle = bisect_p(offset, muf, 1e-15, ub.min(1.0 - 1e-15));
                prop_assert!((p - oracle).abs() < 1e-10, "{} vs {}", p, oracle);
            }
        }
    }
}
