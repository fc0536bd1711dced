//! Dual-parameter learning.
//!
//! Every model trained here is described by a [`Problem`]: a labeled source
//! block whose feature moments the adversary must match, an optional unlabeled
//! target block on which group marginals are matched and the fairness
//! violation is measured, and per-row penalty coefficients `f(a, ., 1)`.
//!
//! [`train_fair_robust`] runs batch gradient descent on `(theta, lambda)` at a
//! fixed penalty weight `mu`:
//!
//! ```text
//! grad_theta    = E_src,Q[phi] - E_src[phi] + 2 C theta
//! grad_lambda_k = E_trg,Q[g_k] - g_k~
//! ```
//!
//! with step `eta_t = eta_0 / (1 + t / T0)`. [`search_mu`] then looks for the
//! `mu` at which the adversary's expected violation changes sign.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureMap};
use crate::error::{Error, Result};
use crate::fair::{
    compute_q, compute_q_linear, domain_upper, fairness_weight, sigmoid, solve_logit_linear, solve_logit_offset, DualParams,
    FairnessCriterion, GroupMarginals, PenaltyForm, PredictionPair,
};

/// Regularization strengths searched when none is given.
pub const L2_GRID: [f64; 7] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial learning rate `eta_0`.
    pub learning_rate: f64,
    /// `T0` in `eta_t = eta_0 / (1 + t / T0)`.
    pub decay_steps: f64,
    pub max_iters: usize,
    pub grad_norm_tol: f64,
    /// `C` in the `C * ||theta||^2` regularizer.
    pub l2_strength: f64,
    pub mu_interval: (f64, f64),
    pub mu_tol: f64,
    pub seed: u64,
    /// Standard deviation of the random initial `theta`.
    pub init_scale: f64,
    /// Logit-width tolerance of the per-row root solve.
    pub root_tol: f64,
    /// Gradient norm beyond which training is declared divergent.
    pub divergence_norm: f64,
    pub solver: Solver,
    /// Largest change of `mu` between consecutive solves.
    pub mu_step: f64,
}

/// How `(theta, lambda)` steps are taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Plain gradient steps with the decaying rate `eta_t`.
    Gradient,
    /// Steps through the inverse Jacobian of the residuals, backtracking on
    /// their squared norm.
    #[default]
    Newton,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            decay_steps: 100.0,
            max_iters: 5000,
            grad_norm_tol: 1e-4,
            l2_strength: 1e-3,
            mu_interval: (-1.5, 1.5),
            mu_tol: 1e-3,
            seed: 0,
            init_scale: 0.01,
            root_tol: 1e-12,
            divergence_norm: 1e6,
            solver: Solver::Newton,
            mu_step: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.l2_strength >= 0.0) {
            return Err(Error::Config("l2 strength must be non-negative".into()));
        }
        if !(self.mu_interval.0 < self.mu_interval.1) {
            return Err(Error::Config("mu interval must be ordered".into()));
        }
        if !(self.decay_steps > 0.0 && self.mu_step > 0.0 && self.grad_norm_tol > 0.0 && self.root_tol > 0.0 && self.mu_tol > 0.0) {
            return Err(Error::Config("decay steps and tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.learning_rate / (1.0 + t as f64 / self.decay_steps)
    }
}

/// Rows sharing one role in training: design matrix `phi(x, 1)`, clipped ratio
/// `P_src/P_trg`, attribute, and the penalty coefficient per unit of `mu`.
#[derive(Debug, Clone)]
pub struct RowBlock {
    pub phi: DMatrix<f64>,
    pub ratio: Vec<f64>,
    pub attribute: Vec<u8>,
    pub penalty_coef: Vec<f64>,
}

impl RowBlock {
    pub fn new(data: &Dataset, map: &FeatureMap, ratio: Vec<f64>) -> Result<Self> {
        if ratio.len() != data.n() {
            return Err(Error::Data(format!("{} ratios for {} rows", ratio.len(), data.n())));
        }
        if let Some(r) = ratio.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Value(format!("density ratio {r} is not positive")));
        }
        Ok(RowBlock {
            phi: map.design_matrix(data),
            ratio,
            attribute: data.attribute().to_vec(),
            penalty_coef: vec![0.0; data.n()],
        })
    }

    pub fn len(&self) -> usize {
        self.ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratio.is_empty()
    }

    /// Coefficient `f(a, 1, 1)` for every row.
    fn with_group_coef(mut self, marg: &GroupMarginals, crit: FairnessCriterion) -> Self {
        self.penalty_coef = self.attribute.iter().map(|&a| fairness_weight(a, 1, 1, marg, crit)).collect();
        self
    }
}

/// Where the fairness violation driving the `mu` search is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationSite {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub source: RowBlock,
    pub labels: Vec<f64>,
    /// Per-row source weights, normalized to mean one.
    pub weights: Vec<f64>,
    pub target: Option<RowBlock>,
    pub form: PenaltyForm,
    /// Group-marginal constraints on the adversary, when active.
    pub group_marginals: Option<GroupMarginals>,
    pub violation_site: ViolationSite,
    pub l2_strength: f64,
}

fn normalized_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::Data(format!("{} weights for {n} rows", w.len())));
            }
            if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Value(format!("weight {bad} is not a positive finite number")));
            }
            let mean = w.iter().sum::<f64>() / n as f64;
            Ok(w.iter().map(|v| v / mean).collect())
        }
    }
}

fn labels_f64(data: &Dataset) -> Result<Vec<f64>> {
    Ok(data.require_labels()?.iter().map(|&y| f64::from(y)).collect())
}

impl Problem {
    /// Shift-robust classifier without fairness: source rows only.
    pub fn rba(source: &Dataset, ratio_st: Vec<f64>, map: &FeatureMap, l2_strength: f64) -> Result<Self> {
        let labels = labels_f64(source)?;
        let block = RowBlock::new(source, map, ratio_st)?;
        Ok(Problem {
            weights: vec![1.0; block.len()],
            source: block,
            labels,
            target: None,
            form: PenaltyForm::Adversarial,
            group_marginals: None,
            violation_site: ViolationSite::Target,
            l2_strength,
        })
    }

    /// The fair robust predictor: source moments, target group marginals and a
    /// target fairness penalty.
    #[allow(clippy::too_many_arguments)]
    pub fn fair_robust(
        source: &Dataset,
        source_ratio_st: Vec<f64>,
        target: &Dataset,
        target_ratio_st: Vec<f64>,
        map: &FeatureMap,
        marg: GroupMarginals,
        crit: FairnessCriterion,
        l2_strength: f64,
    ) -> Result<Self> {
        let labels = labels_f64(source)?;
        let src = RowBlock::new(source, map, source_ratio_st)?.with_group_coef(&marg, crit);
        let trg = RowBlock::new(target, map, target_ratio_st)?.with_group_coef(&marg, crit);
        Ok(Problem {
            weights: vec![1.0; src.len()],
            source: src,
            labels,
            target: Some(trg),
            form: crit.penalty_form(),
            group_marginals: crit.uses_group_constraints().then_some(marg),
            violation_site: ViolationSite::Target,
            l2_strength,
        })
    }

    /// Fairness with observed labels on the source sample under the iid
    /// assumption: unit ratios and a penalty linear in the predictor, with
    /// per-row coefficient `f(a_i, y_i, 1)`.
    pub fn fair_iid(
        source: &Dataset,
        weights: Option<&[f64]>,
        map: &FeatureMap,
        marg: GroupMarginals,
        crit: FairnessCriterion,
        l2_strength: f64,
    ) -> Result<Self> {
        let y = source.require_labels()?;
        let mut block = RowBlock::new(source, map, vec![1.0; source.n()])?;
        block.penalty_coef =
            block.attribute.iter().zip(y).map(|(&a, &yi)| fairness_weight(a, yi, 1, &marg, crit)).collect();
        Ok(Problem {
            weights: normalized_weights(weights, source.n())?,
            labels: y.iter().map(|&v| f64::from(v)).collect(),
            source: block,
            target: None,
            form: PenaltyForm::Linear,
            group_marginals: None,
            violation_site: ViolationSite::Source,
            l2_strength,
        })
    }

    pub fn dimension(&self) -> usize {
        self.source.phi.ncols()
    }

    fn lambda_active(&self) -> bool {
        self.group_marginals.is_some()
    }
}

/// Solves every row of `block` at the given parameters.
pub fn solve_block(
    block: &RowBlock,
    params: &DualParams,
    form: PenaltyForm,
    lambda_active: bool,
    root_tol: f64,
) -> Result<Vec<PredictionPair>> {
    let theta = DVector::from_column_slice(&params.theta);
    let scores = &block.phi * theta;
    (0..block.len())
        .into_par_iter()
        .map(|i| {
            let lam = if lambda_active { params.lambda[usize::from(block.attribute[i])] } else { 0.0 };
            let offset = block.ratio[i] * scores[i] + lam;
            let muf = params.mu * block.penalty_coef[i];
            if !offset.is_finite() {
                return Err(Error::Numerical(format!("non-finite score at row {i}")));
            }
            let (p, logit, q) = match form {
                PenaltyForm::Adversarial => {
                    let (p, z) = solve_logit_offset(offset, muf, root_tol);
                    (p, z, compute_q(p, muf)?)
                }
                PenaltyForm::Linear => {
                    let (p, z) = solve_logit_linear(offset, muf);
                    (p, z, compute_q_linear(p, muf)?)
                }
            };
            Ok(PredictionPair { p, q, logit })
        })
        .collect()
}

/// Offsets `r * theta . phi + lambda_a` of each row, as used by the root solve.
pub fn block_offsets(block: &RowBlock, params: &DualParams, lambda_active: bool) -> Vec<f64> {
    let scores = &block.phi * DVector::from_column_slice(&params.theta);
    (0..block.len())
        .map(|i| {
            let lam = if lambda_active { params.lambda[usize::from(block.attribute[i])] } else { 0.0 };
            block.ratio[i] * scores[i] + lam
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub params: DualParams,
    /// `E_src,Q[phi] - E_src[phi] + 2 C theta` at the returned parameters.
    pub xi_residual: Vec<f64>,
    /// `E_trg,Q[g_k] - g_k~`; zero when group constraints are inactive.
    pub gamma_residual: [f64; 2],
    pub iterations_used: usize,
    pub converged: bool,
    pub source_pairs: Vec<PredictionPair>,
    pub target_pairs: Vec<PredictionPair>,
    /// Expected fairness violation at the returned parameters.
    pub violation: f64,
}

impl TrainState {
    pub fn residual_norm(&self) -> f64 {
        inf_norm(&self.xi_residual).max(inf_norm(&self.gamma_residual))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Evaluation {
    grad_theta: Vec<f64>,
    grad_lambda: [f64; 2],
    source_pairs: Vec<PredictionPair>,
    target_pairs: Vec<PredictionPair>,
}

impl Evaluation {
    fn norm(&self, lambda_active: bool) -> f64 {
        let g = inf_norm(&self.grad_theta);
        if lambda_active {
            g.max(inf_norm(&self.grad_lambda))
        } else {
            g
        }
    }
}

fn evaluate(problem: &Problem, params: &DualParams, root_tol: f64) -> Result<Evaluation> {
    let lambda_active = problem.lambda_active();
    let source_pairs = solve_block(&problem.source, params, problem.form, lambda_active, root_tol)?;
    let n = problem.source.len() as f64;
    let resid = DVector::from_iterator(
        source_pairs.len(),
        source_pairs.iter().enumerate().map(|(i, pq)| problem.weights[i] * (pq.q - problem.labels[i]) / n),
    );
    let mut grad = problem.source.phi.tr_mul(&resid);
    for (g, t) in grad.iter_mut().zip(&params.theta) {
        *g += 2.0 * problem.l2_strength * t;
    }
    if let Some((j, _)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in feature {j}")));
    }

    let mut grad_lambda = [0.0; 2];
    let target_pairs = match &problem.target {
        Some(block) => {
            let pairs = solve_block(block, params, problem.form, lambda_active, root_tol)?;
            if let Some(marg) = &problem.group_marginals {
                let m = block.len() as f64;
                let mut mass = [0.0; 2];
                for (pq, &a) in pairs.iter().zip(&block.attribute) {
                    mass[usize::from(a)] += pq.q;
                }
                grad_lambda = [mass[0] / m - marg.g_tilde_0, mass[1] / m - marg.g_tilde_1];
            }
            pairs
        }
        None => Vec::new(),
    };
    Ok(Evaluation { grad_theta: grad.iter().copied().collect(), grad_lambda, source_pairs, target_pairs })
}

/// Expected violation of the solved rows at the problem's violation site.
pub fn problem_violation(problem: &Problem, source: &[PredictionPair], target: &[PredictionPair]) -> f64 {
    let (block, pairs, weights): (&RowBlock, &[PredictionPair], Option<&[f64]>) = match problem.violation_site {
        ViolationSite::Source => (&problem.source, source, Some(&problem.weights)),
        ViolationSite::Target => match &problem.target {
            Some(b) => (b, target, None),
            None => return 0.0,
        },
    };
    let mut total = 0.0;
    let mut mass = 0.0;
    for (i, pq) in pairs.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let cell = match problem.form {
            PenaltyForm::Adversarial => pq.q * pq.p,
            PenaltyForm::Linear => pq.p,
        };
        total += w * block.penalty_coef[i] * cell;
        mass += w;
    }
    total / mass
}

/// `dq/d offset` of one solved row; zero where the row sits on a domain
/// boundary or the logistic value has saturated.
fn row_sensitivity(pq: PredictionPair, muf: f64, form: PenaltyForm) -> f64 {
    let p = pq.p;
    let s = p * (1.0 - p);
    match form {
        PenaltyForm::Adversarial => {
            if muf > 1.0 && p >= domain_upper(muf) {
                return 0.0;
            }
            let dp = s / (1.0 - muf * s);
            let d = 1.0 - muf * p + muf * p * p;
            dp * (1.0 - muf * p * p) / (d * d)
        }
        PenaltyForm::Linear => {
            if (muf > 1.0 && p >= 1.0 / muf) || (muf < -1.0 && p <= 1.0 + 1.0 / muf) {
                return 0.0;
            }
            s * (1.0 + muf * (1.0 - 2.0 * p))
        }
    }
}

/// Jacobian of the stacked residual `(grad_theta, grad_lambda)` with respect
/// to `(theta, lambda)`.
fn jacobian(problem: &Problem, params: &DualParams, eval: &Evaluation) -> DMatrix<f64> {
    let src = &problem.source;
    let m = src.phi.ncols();
    let lambda_active = problem.lambda_active();
    let size = if lambda_active { m + 2 } else { m };
    let mut jac = DMatrix::<f64>::zeros(size, size);
    let n = src.len() as f64;
    for (i, pq) in eval.source_pairs.iter().enumerate() {
        let kappa = row_sensitivity(*pq, params.mu * src.penalty_coef[i], problem.form);
        if kappa == 0.0 {
            continue;
        }
        let row = src.phi.row(i).transpose();
        let w = problem.weights[i] * kappa / n;
        jac.view_mut((0, 0), (m, m)).ger(w * src.ratio[i], &row, &row, 1.0);
        if lambda_active {
            let k = m + usize::from(src.attribute[i]);
            for j in 0..m {
                jac[(j, k)] += w * row[j];
            }
        }
    }
    for j in 0..m {
        jac[(j, j)] += 2.0 * problem.l2_strength;
    }
    if lambda_active {
        let trg = problem.target.as_ref().expect("group constraints need target rows");
        let mm = trg.len() as f64;
        for (i, pq) in eval.target_pairs.iter().enumerate() {
            let kappa = row_sensitivity(*pq, params.mu * trg.penalty_coef[i], problem.form) / mm;
            let k = m + usize::from(trg.attribute[i]);
            for j in 0..m {
                jac[(k, j)] += kappa * trg.ratio[i] * trg.phi[(i, j)];
            }
            jac[(k, k)] += kappa;
        }
    }
    jac
}

fn stacked(eval: &Evaluation, lambda_active: bool) -> DVector<f64> {
    let mut v = eval.grad_theta.clone();
    if lambda_active {
        v.extend_from_slice(&eval.grad_lambda);
    }
    DVector::from_vec(v)
}

/// Newton direction, or a Levenberg-Marquardt direction when `damping > 0`.
fn step_direction(jac: &DMatrix<f64>, f: &DVector<f64>, damping: f64) -> Option<DVector<f64>> {
    if damping == 0.0 {
        return jac.clone().lu().solve(f);
    }
    let mut normal = jac.tr_mul(jac);
    let scale = normal.diagonal().amax().max(1e-12);
    for j in 0..normal.nrows() {
        normal[(j, j)] += damping * scale;
    }
    normal.cholesky().map(|ch| ch.solve(&jac.tr_mul(f)))
}

fn displaced(params: &DualParams, d: &DVector<f64>, alpha: f64, m: usize, lambda_active: bool) -> DualParams {
    let mut next = params.clone();
    for (j, th) in next.theta.iter_mut().enumerate() {
        *th -= alpha * d[j];
    }
    if lambda_active {
        next.lambda[0] -= alpha * d[m];
        next.lambda[1] -= alpha * d[m + 1];
    }
    next
}

/// Largest change of any parameter in one Newton step.
const MAX_STEP: f64 = 2.0;
/// Newton stops early when the residual norm has not dropped by this factor
/// over the last `STALL_WINDOW` iterations.
const STALL_FACTOR: f64 = 0.9;
const STALL_WINDOW: usize = 10;

pub fn random_init(m: usize, cfg: &TrainConfig) -> DualParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_scale.max(0.0)).expect("finite scale");
    DualParams { theta: (0..m).map(|_| normal.sample(&mut rng)).collect(), lambda: [0.0; 2], mu: 0.0 }
}

/// Drives the source moment residual and target marginal residual to zero at
/// fixed `mu`.
///
/// Without `init`, training starts from a seeded random `theta` and
/// `lambda = 0` at `mu = 0`. With `init`, it starts from those parameters at
/// their own `mu`. Either way the penalty weight then moves to `mu` in steps
/// of at most `cfg.mu_step`, each solved from the previous solution, so the
/// result follows one continuous branch of solutions.
pub fn train_fair_robust(
    problem: &Problem,
    mu: f64,
    init: Option<&DualParams>,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    let m = problem.dimension();
    let mut params = match init {
        Some(p) if p.theta.len() == m => p.clone(),
        Some(p) => {
            return Err(Error::Config(format!("initial theta has {} entries, model needs {m}", p.theta.len())))
        }
        None => random_init(m, cfg),
    };
    if !mu.is_finite() {
        return Err(Error::Config(format!("penalty weight {mu} is not finite")));
    }
    if !problem.lambda_active() {
        params.lambda = [0.0; 2];
    }
    let has_penalty = problem.source.penalty_coef.iter().any(|c| *c != 0.0)
        || problem.target.as_ref().is_some_and(|b| b.penalty_coef.iter().any(|c| *c != 0.0));
    let start = if has_penalty && params.mu.is_finite() { params.mu } else { mu };
    let legs = ((mu - start).abs() / cfg.mu_step).ceil().max(1.0) as usize;

    let mut iterations = 0;
    let mut solved = None;
    let first = if init.is_none() && legs > 1 { 0 } else { 1 };
    for leg in first..=legs {
        let mu_leg = if leg == legs { mu } else { start + (mu - start) * leg as f64 / legs as f64 };
        params.mu = mu_leg;
        let (p, eval, t, converged) = solve_fixed_mu(problem, params, cfg)?;
        iterations += t;
        params = p;
        solved = Some((eval, converged));
    }
    let (eval, converged) = solved.expect("at least one leg");
    let violation = problem_violation(problem, &eval.source_pairs, &eval.target_pairs);
    Ok(TrainState {
        params,
        xi_residual: eval.grad_theta,
        gamma_residual: eval.grad_lambda,
        iterations_used: iterations,
        converged,
        source_pairs: eval.source_pairs,
        target_pairs: eval.target_pairs,
        violation,
    })
}

fn solve_fixed_mu(
    problem: &Problem,
    mut params: DualParams,
    cfg: &TrainConfig,
) -> Result<(DualParams, Evaluation, usize, bool)> {
    let mu = params.mu;
    let lambda_active = problem.lambda_active();
    let mut eval = evaluate(problem, &params, cfg.root_tol)?;
    let mut norm = eval.norm(lambda_active);
    let mut t = 0usize;
    let mut converged = norm <= cfg.grad_norm_tol;
    let mut history = vec![norm];
    while !converged && t < cfg.max_iters {
        let next = match cfg.solver {
            Solver::Gradient => {
                let eta = cfg.step_size(t);
                let mut next = params.clone();
                for (th, g) in next.theta.iter_mut().zip(&eval.grad_theta) {
                    *th -= eta * g;
                }
                if lambda_active {
                    for k in 0..2 {
                        next.lambda[k] -= eta * eval.grad_lambda[k];
                    }
                }
                Some((evaluate(problem, &next, cfg.root_tol)?, next))
            }
            Solver::Newton => newton_step(problem, &params, &eval, cfg)?,
        };
        let Some((c, p)) = next else {
            log::debug!("no step reduces the residual further (norm {norm:.3e}, mu={mu})");
            break;
        };
        params = p;
        eval = c;
        norm = eval.norm(lambda_active);
        t += 1;
        if !norm.is_finite() || norm > cfg.divergence_norm {
            return Err(Error::Divergence { iteration: t, norm });
        }
        converged = norm <= cfg.grad_norm_tol;
        history.push(norm);
        if cfg.solver == Solver::Newton && t >= STALL_WINDOW && norm > STALL_FACTOR * history[t - STALL_WINDOW] {
            log::debug!("residual stalled at {norm:.3e} (mu={mu})");
            break;
        }
    }
    if !converged {
        log::debug!("training stopped after {t} iterations with residual {norm:.3e} (mu={mu})");
    }
    Ok((params, eval, t, converged))
}

/// One Jacobian-preconditioned step with backtracking on the squared residual
/// norm; damping is raised when the undamped direction makes no progress.
fn newton_step(
    problem: &Problem,
    params: &DualParams,
    eval: &Evaluation,
    cfg: &TrainConfig,
) -> Result<Option<(Evaluation, DualParams)>> {
    let lambda_active = problem.lambda_active();
    let m = problem.dimension();
    let f = stacked(eval, lambda_active);
    let merit = 0.5 * f.norm_squared();
    let jac = jacobian(problem, params, eval);
    // Shallow backtracking across all damping levels first: near saturated rows
    // the undamped direction is often useless and deep halving wastes solves.
    for floor in [1.0 / 32.0, 1e-10] {
        for damping in [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
            let Some(mut d) = step_direction(&jac, &f, damping) else { continue };
            let longest = d.amax();
            if longest > MAX_STEP {
                d *= MAX_STEP / longest;
            }
            let slope = f.dot(&(&jac * &d));
            if !(slope > 0.0) || !d.iter().all(|v| v.is_finite()) {
                continue;
            }
            let mut alpha = 1.0;
            while alpha >= floor {
                let next = displaced(params, &d, alpha, m, lambda_active);
                match evaluate(problem, &next, cfg.root_tol) {
                    Ok(c) => {
                        let c_merit = 0.5 * stacked(&c, lambda_active).norm_squared();
                        if c_merit <= merit - 1e-4 * alpha * slope {
                            return Ok(Some((c, next)));
                        }
                    }
                    Err(Error::Numerical(_)) | Err(Error::Domain(_)) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
        }
    }
    Ok(None)
}

/// Result of the shift-robust (fairness-free) classifier.
#[derive(Debug, Clone)]
pub struct RbaModel {
    pub theta: Vec<f64>,
    pub state: TrainState,
}

impl RbaModel {
    /// `P(y=1|x,a)` for rows with design matrix `phi` and ratios `ratio_st`.
    pub fn probe(&self, phi: &DMatrix<f64>, ratio_st: &[f64]) -> Vec<f64> {
        let scores = phi * DVector::from_column_slice(&self.theta);
        scores.iter().zip(ratio_st).map(|(s, r)| sigmoid(r * s)).collect()
    }

    pub fn probe_dataset(&self, data: &Dataset, map: &FeatureMap, ratio_st: &[f64]) -> Vec<f64> {
        self.probe(&map.design_matrix(data), ratio_st)
    }
}

/// The robust bias-aware classifier: `P(y|x) ∝ exp(r(x) theta . phi(x, y))`
/// with `theta` matching source feature moments.
pub fn train_rba(source: &Dataset, ratio_st: &[f64], map: &FeatureMap, cfg: &TrainConfig) -> Result<RbaModel> {
    let problem = Problem::rba(source, ratio_st.to_vec(), map, cfg.l2_strength)?;
    let state = train_fair_robust(&problem, 0.0, None, cfg)?;
    Ok(RbaModel { theta: state.params.theta.clone(), state })
}

/// Outcome of the search for the zero of the expected violation.
#[derive(Debug, Clone)]
pub struct MuSearch {
    pub mu: f64,
    pub state: TrainState,
    pub violation: f64,
    /// False when no sign change was found and an endpoint was returned.
    pub bracketed: bool,
    /// Every `(mu, violation)` probed, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Finds `mu` in the configured interval where the inner solution's violation
/// crosses zero.
///
/// `inner(mu, warm)` trains at `mu`, optionally warm-started from the solution
/// of the nearest `mu` probed so far, and returns the state with its violation.
pub fn search_mu<F>(mut inner: F, cfg: &TrainConfig) -> Result<MuSearch>
where
    F: FnMut(f64, Option<&DualParams>) -> Result<TrainState>,
{
    cfg.validate()?;
    let (lo, hi) = cfg.mu_interval;
    let mut trace = Vec::new();
    let mut last: Vec<DualParams> = Vec::new();
    let mut probe = |mu: f64, trace: &mut Vec<(f64, f64)>, last: &mut Vec<DualParams>| -> Result<TrainState> {
        let warm = last.iter().min_by(|a, b| (a.mu - mu).abs().total_cmp(&(b.mu - mu).abs()));
        let state = inner(mu, warm).map_err(|e| Error::AtMu { mu, source: Box::new(e) })?;
        trace.push((mu, state.violation));
        last.push(state.params.clone());
        Ok(state)
    };

    let origin = if lo < 0.0 && hi > 0.0 { 0.0 } else { 0.5 * (lo + hi) };
    let at_origin = probe(origin, &mut trace, &mut last)?;
    if at_origin.violation.abs() <= cfg.mu_tol {
        let v = at_origin.violation;
        return Ok(MuSearch { mu: origin, state: at_origin, violation: v, bracketed: true, trace });
    }
    let at_lo = probe(lo, &mut trace, &mut last)?;
    let at_hi = probe(hi, &mut trace, &mut last)?;

    let v0 = at_origin.violation;
    let (mut a, mut va, mut b) = if at_lo.violation * v0 < 0.0 {
        (lo, at_lo.violation, origin)
    } else if v0 * at_hi.violation < 0.0 {
        (origin, v0, hi)
    } else {
        let candidates = [(lo, at_lo), (origin, at_origin), (hi, at_hi)];
        let (mu, state) = candidates
            .into_iter()
            .min_by(|x, y| x.1.violation.abs().total_cmp(&y.1.violation.abs()))
            .expect("three candidates");
        log::warn!("no sign change of the fairness violation on [{lo}, {hi}]; using mu = {mu}");
        let v = state.violation;
        return Ok(MuSearch { mu, state, violation: v, bracketed: false, trace });
    };

    let mut best: Option<(f64, TrainState)> = None;
    while b - a > 1e-3 {
        let mid = 0.5 * (a + b);
        let state = probe(mid, &mut trace, &mut last)?;
        let v = state.violation;
        let better = best.as_ref().map_or(true, |(_, s)| v.abs() < s.violation.abs());
        if v.abs() <= cfg.mu_tol {
            return Ok(MuSearch { mu: mid, state, violation: v, bracketed: true, trace });
        }
        if va * v < 0.0 {
            b = mid;
        } else {
            a = mid;
            va = v;
        }
        if better {
            best = Some((mid, state));
        }
    }
    let (mu, state) = match best {
        Some(b) => b,
        None => {
            let mid = 0.5 * (a + b);
            (mid, probe(mid, &mut trace, &mut last)?)
        }
    };
    let v = state.violation;
    Ok(MuSearch { mu, state, violation: v, bracketed: true, trace })
}
