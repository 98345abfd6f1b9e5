//! Momentum projected-gradient ascent on the smoothed set objective, with
//! checkpointed step-size halving, plus the single-loss baseline that is its
//! `K = 1, m = 1` special case.
//!
//! One run maintains `K` candidate inputs at once. Every iteration takes a
//! gradient step on all of them, projects each row back into the
//! `‖x' - x‖_inf <= eps` box intersected with `[0,1]^d`, and blends the step
//! with the previous displacement (momentum `alpha`). At checkpoint
//! iterations the step size is halved and the iterate reset to the best
//! point seen so far if either
//!
//! 1. too few iterations since the last checkpoint improved the objective
//!    (fewer than `rho` of them), or
//! 2. both the step size and the best value are unchanged since the last
//!    checkpoint.
//!
//! A point counts as attacked as soon as *any* of the `K` rows misclassifies
//! at *any* visited iterate.

use crate::classifier::{ClassifierWeights, LabeledPoint};
use crate::losses::{self, LogitContext, LossId};
use crate::objective::{grad_set_objective, LossMatrix, PerturbationSet};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hyperparameters of one attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// `l_inf` perturbation budget.
    pub epsilon: f64,
    /// Initial step size; defaults to `2 * epsilon` when absent.
    #[serde(default)]
    pub eta0: Option<f64>,
    /// Total iterations (gradient evaluations minus one).
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    /// Momentum mixing coefficient.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Checkpoint success-ratio threshold.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Smoothing temperature of the set objective.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Losses forming the objective rows.
    pub losses: Vec<LossId>,
    /// Number of jointly optimized perturbations.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    /// Return at the first misclassifying iterate.
    #[serde(default)]
    pub early_stop: bool,
}

fn default_n_iter() -> usize {
    50
}
fn default_alpha() -> f64 {
    0.75
}
fn default_rho() -> f64 {
    0.75
}
fn default_mu() -> f64 {
    1.0
}
fn default_k() -> usize {
    1
}

impl AttackConfig {
    /// Defaults for a given budget: 50 iterations, `eta0 = 2 eps`,
    /// `alpha = rho = 0.75`, `mu = 1`, all eight losses, `K = 1`.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            eta0: None,
            n_iter: default_n_iter(),
            alpha: default_alpha(),
            rho: default_rho(),
            mu: default_mu(),
            losses: LossId::ALL.to_vec(),
            k: default_k(),
            seed: 0,
            early_stop: false,
        }
    }

    pub fn eta0(&self) -> f64 {
        self.eta0.unwrap_or(2.0 * self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        use crate::Error::InvalidArgument;
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(InvalidArgument(format!("epsilon {} < 0", self.epsilon)));
        }
        if self.eta0() < 0.0 {
            return Err(InvalidArgument("eta0 must be non-negative".into()));
        }
        if self.n_iter == 0 {
            return Err(InvalidArgument("n_iter must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(InvalidArgument(format!(
                "alpha {} not in (0,1]",
                self.alpha
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(InvalidArgument(format!("rho {} not in (0,1)", self.rho)));
        }
        if !(self.mu > 0.0) {
            return Err(InvalidArgument(format!("mu {} must be positive", self.mu)));
        }
        if self.k == 0 {
            return Err(InvalidArgument("k must be at least 1".into()));
        }
        if self.losses.is_empty() {
            return Err(InvalidArgument("losses must not be empty".into()));
        }
        Ok(())
    }
}

/// Clamp every row coordinatewise into
/// `[max(0, x_j - eps), min(1, x_j + eps)]`. Idempotent.
pub fn project_set(rows: &[Vec<f64>], origin: &[f64], epsilon: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| {
            row.iter()
                .zip(origin)
                .map(|(&v, &x)| v.clamp((x - epsilon).max(0.0), (x + epsilon).min(1.0)))
                .collect()
        })
        .collect()
}

/// Checkpoint iterations `w_j = ceil(p_j * n_iter)` for the fraction
/// sequence `p_0 = 0, p_1 = 0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03,
/// 0.06)`, truncated at `n_iter`, duplicates removed.
///
/// The fractions are exact hundredths, so the arithmetic is done on integer
/// hundredths and the result is bit-stable.
pub fn checkpoint_schedule(n_iter: usize) -> Vec<usize> {
    assert!(n_iter >= 1, "schedule needs n_iter >= 1");
    let ceil_div = |p: usize| (p * n_iter).div_ceil(100).min(n_iter);
    let mut hundredths = vec![0usize, 22];
    while ceil_div(*hundredths.last().unwrap()) < n_iter {
        let last = hundredths[hundredths.len() - 1];
        let prev = hundredths[hundredths.len() - 2];
        hundredths.push(last + (last - prev).saturating_sub(3).max(6));
    }
    let mut out: Vec<usize> = hundredths.into_iter().map(ceil_div).collect();
    out.dedup();
    out
}

/// Iteration and set member of the first recorded misclassification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessEvent {
    pub iteration: usize,
    pub member: usize,
}

/// A gradient evaluation failed mid-run; the outcome holds the progress made
/// up to that iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NumericFailure {
    pub iteration: usize,
    pub detail: String,
}

/// Per-iterate record of the run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub objective_best: f64,
    pub eta: f64,
    /// Cumulative: has any row misclassified up to this iterate.
    pub success: bool,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Perturbations of the last iterate.
    pub final_deltas: PerturbationSet,
    /// Perturbations of the best-objective iterate (`X_max - x`).
    pub best_deltas: PerturbationSet,
    pub success: bool,
    pub first_success: Option<SuccessEvent>,
    pub trace: Vec<TracePoint>,
    /// Loss values `m x K` at the best iterate; feeds the pattern miner.
    pub loss_values: Option<LossMatrix>,
    pub failure: Option<NumericFailure>,
}

impl AttackOutcome {
    /// Iterations actually spent (last trace index).
    pub fn iterations(&self) -> usize {
        self.trace.last().map(|t| t.iteration).unwrap_or(0)
    }
}

/// Live loop state handed to observers after every finalized iterate.
#[derive(Debug, Clone)]
pub struct AttackState {
    /// Current `K` adversarial inputs (not deltas).
    pub x: Vec<Vec<f64>>,
    pub x_prev: Vec<Vec<f64>>,
    pub g_max: f64,
    pub x_max: Vec<Vec<f64>>,
    pub eta: f64,
    /// Strict objective increases since the last checkpoint.
    pub success_count_since_checkpoint: usize,
    pub eta_at_checkpoint: f64,
    pub gmax_at_checkpoint: f64,
    pub first_success: Option<SuccessEvent>,
}

/// Observer payload: the iterate index just finalized, its objective value,
/// and the loop state.
pub struct AttackObservation<'a> {
    pub iteration: usize,
    pub objective: f64,
    pub state: &'a AttackState,
}

/// Objective evaluated by the ascent loop: value at the given inputs,
/// gradient per row, and the loss matrix for bookkeeping.
trait AscentObjective {
    fn eval_grad(&mut self, rows: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>, LossMatrix)>;
}

struct SmoothedSetObjective<'a> {
    model: &'a ClassifierWeights,
    point: &'a LabeledPoint,
    losses: &'a [LossId],
    mu: f64,
}

impl AscentObjective for SmoothedSetObjective<'_> {
    fn eval_grad(&mut self, rows: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>, LossMatrix)> {
        let deltas: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&self.point.x).map(|(a, b)| a - b).collect())
            .collect();
        let set = PerturbationSet::new(deltas)?;
        let out = grad_set_objective(self.model, self.point, &set, self.losses, self.mu)?;
        Ok((out.value, out.grads, out.loss_matrix))
    }
}

struct SingleLossObjective<'a> {
    model: &'a ClassifierWeights,
    point: &'a LabeledPoint,
    loss: LossId,
}

impl AscentObjective for SingleLossObjective<'_> {
    fn eval_grad(&mut self, rows: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>, LossMatrix)> {
        let ctx = LogitContext::new(self.model.forward(&rows[0])?, self.point.y)?;
        let (value, glog) = losses::eval_loss_and_grad(self.loss, &ctx)?;
        let grad = self.model.backward_input(&rows[0], &glog)?;
        Ok((value, vec![grad], LossMatrix::from_rows(vec![vec![value]])?))
    }
}

/// Run the full set attack. Equivalent to
/// [`mos_attack_observed`] with a no-op observer and seeded initialization.
pub fn mos_attack(
    model: &ClassifierWeights,
    point: &LabeledPoint,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    mos_attack_observed(model, point, cfg, None, |_| {})
}

/// Run the set attack with an explicit initial perturbation set (pass `None`
/// for the seeded uniform initialization) and a per-iterate observer.
pub fn mos_attack_observed(
    model: &ClassifierWeights,
    point: &LabeledPoint,
    cfg: &AttackConfig,
    init: Option<&PerturbationSet>,
    observer: impl FnMut(&AttackObservation),
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let mut objective = SmoothedSetObjective {
        model,
        point,
        losses: &cfg.losses,
        mu: cfg.mu,
    };
    run_ascent(&mut objective, model, point, cfg, cfg.k, init, observer)
}

/// Single-objective baseline: the same loop driving one example on one raw
/// loss, with no scalarization layer in between.
pub fn apgd_single(
    model: &ClassifierWeights,
    point: &LabeledPoint,
    loss: LossId,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    apgd_single_observed(model, point, loss, cfg, |_| {})
}

/// [`apgd_single`] with a per-iterate observer.
pub fn apgd_single_observed(
    model: &ClassifierWeights,
    point: &LabeledPoint,
    loss: LossId,
    cfg: &AttackConfig,
    observer: impl FnMut(&AttackObservation),
) -> Result<AttackOutcome> {
    let single = AttackConfig {
        losses: vec![loss],
        k: 1,
        ..cfg.clone()
    };
    single.validate()?;
    let mut objective = SingleLossObjective { model, point, loss };
    run_ascent(&mut objective, model, point, &single, 1, None, observer)
}

/// Combined success over independently produced outcomes: any constituent
/// success counts.
pub fn ensemble_best(outcomes: &[AttackOutcome]) -> bool {
    outcomes.iter().any(|o| o.success)
}

fn sample_init(cfg: &AttackConfig, k: usize, dim: usize) -> Vec<Vec<f64>> {
    if cfg.epsilon == 0.0 {
        return vec![vec![0.0; dim]; k];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..k)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-cfg.epsilon..=cfg.epsilon))
                .collect()
        })
        .collect()
}

fn misclassifying_member(
    model: &ClassifierWeights,
    rows: &[Vec<f64>],
    y: usize,
) -> Result<Option<usize>> {
    for (k, row) in rows.iter().enumerate() {
        if model.predict(row)? != y {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

fn deltas_of(rows: &[Vec<f64>], x: &[f64]) -> PerturbationSet {
    PerturbationSet::new(
        rows.iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| a - b).collect())
            .collect(),
    )
    .expect("non-empty rows")
}

fn run_ascent<O: AscentObjective>(
    objective: &mut O,
    model: &ClassifierWeights,
    point: &LabeledPoint,
    cfg: &AttackConfig,
    k: usize,
    init: Option<&PerturbationSet>,
    mut observer: impl FnMut(&AttackObservation),
) -> Result<AttackOutcome> {
    let x = &point.x;
    let dim = x.len();
    let eps = cfg.epsilon;
    let init_rows: Vec<Vec<f64>> = match init {
        Some(set) => {
            if set.k() != k || set.dim() != dim {
                return Err(crate::Error::ShapeMismatch(format!(
                    "init set is {}x{}, attack needs {k}x{dim}",
                    set.k(),
                    set.dim()
                )));
            }
            set.deltas()
                .iter()
                .map(|d| d.iter().zip(x).map(|(a, b)| a + b).collect())
                .collect()
        }
        None => sample_init(cfg, k, dim)
            .into_iter()
            .map(|d| d.iter().zip(x).map(|(a, b)| a + b).collect())
            .collect(),
    };
    let x0 = project_set(&init_rows, x, eps);

    let mut state = AttackState {
        x: x0.clone(),
        x_prev: x0.clone(),
        g_max: f64::NEG_INFINITY,
        x_max: x0.clone(),
        eta: cfg.eta0(),
        success_count_since_checkpoint: 0,
        eta_at_checkpoint: cfg.eta0(),
        gmax_at_checkpoint: f64::NEG_INFINITY,
        first_success: None,
    };
    let mut trace: Vec<TracePoint> = Vec::with_capacity(cfg.n_iter + 1);
    let mut g_trace: Vec<f64> = Vec::with_capacity(cfg.n_iter + 1);
    let mut best_matrix: Option<LossMatrix> = None;

    let fail = |trace: &[TracePoint],
                state: &AttackState,
                best_matrix: &Option<LossMatrix>,
                iteration: usize,
                err: crate::Error| {
        AttackOutcome {
            final_deltas: deltas_of(&state.x, x),
            best_deltas: deltas_of(&state.x_max, x),
            success: state.first_success.is_some(),
            first_success: state.first_success,
            trace: trace.to_vec(),
            loss_values: best_matrix.clone(),
            failure: Some(NumericFailure {
                iteration,
                detail: err.to_string(),
            }),
        }
    };

    macro_rules! record_success {
        ($rows:expr, $iter:expr) => {
            if state.first_success.is_none() {
                if let Some(member) = misclassifying_member(model, $rows, point.y)? {
                    state.first_success = Some(SuccessEvent {
                        iteration: $iter,
                        member,
                    });
                }
            }
        };
    }
    macro_rules! push_trace {
        ($iter:expr, $g:expr) => {
            g_trace.push($g);
            trace.push(TracePoint {
                iteration: $iter,
                objective: $g,
                objective_best: state.g_max,
                eta: state.eta,
                success: state.first_success.is_some(),
            });
            observer(&AttackObservation {
                iteration: $iter,
                objective: $g,
                state: &state,
            });
        };
    }

    // Iterate 0: seeded start.
    let (g0, grad0, lm0) = match objective.eval_grad(&x0) {
        Ok(v) => v,
        Err(e) => return Ok(fail(&trace, &state, &best_matrix, 0, e)),
    };
    state.g_max = g0;
    best_matrix = Some(lm0);
    record_success!(&x0, 0);
    push_trace!(0, g0);
    if cfg.early_stop && state.first_success.is_some() {
        return Ok(finish(state, x, trace, best_matrix));
    }

    // Iterate 1: one plain ascent step, no momentum.
    let stepped: Vec<Vec<f64>> = x0
        .iter()
        .zip(&grad0)
        .map(|(row, g)| row.iter().zip(g).map(|(a, b)| a + state.eta * b).collect())
        .collect();
    let x1 = project_set(&stepped, x, eps);
    let (g1, grad1, lm1) = match objective.eval_grad(&x1) {
        Ok(v) => v,
        Err(e) => {
            state.x_prev = state.x.clone();
            state.x = x1;
            return Ok(fail(&trace, &state, &best_matrix, 1, e));
        }
    };
    let mut grad_max = grad0; // gradient at x_max
    if g1 > g0 {
        state.g_max = g1;
        state.x_max = x1.clone();
        grad_max = grad1.clone();
        best_matrix = Some(lm1);
    }
    state.gmax_at_checkpoint = state.g_max;
    state.x_prev = x0;
    state.x = x1;
    record_success!(&state.x, 1);
    push_trace!(1, g1);
    if cfg.early_stop && state.first_success.is_some() {
        return Ok(finish(state, x, trace, best_matrix));
    }

    let schedule = checkpoint_schedule(cfg.n_iter);
    let mut next_ckpt = 1usize; // schedule[0] is always 0
    let mut grad_cur = grad1;

    for iter in 1..cfg.n_iter {
        // Plain step, then momentum blend, each projected.
        let z: Vec<Vec<f64>> = {
            let stepped: Vec<Vec<f64>> = state
                .x
                .iter()
                .zip(&grad_cur)
                .map(|(row, g)| row.iter().zip(g).map(|(a, b)| a + state.eta * b).collect())
                .collect();
            project_set(&stepped, x, eps)
        };
        let blended: Vec<Vec<f64>> = state
            .x
            .iter()
            .zip(z.iter().zip(&state.x_prev))
            .map(|(cur, (zr, prev))| {
                cur.iter()
                    .zip(zr.iter().zip(prev))
                    .map(|(&c, (&zv, &p))| c + cfg.alpha * (zv - c) + (1.0 - cfg.alpha) * (c - p))
                    .collect()
            })
            .collect();
        let x_new = project_set(&blended, x, eps);

        let (g_new, grad_new, lm_new) = match objective.eval_grad(&x_new) {
            Ok(v) => v,
            Err(e) => {
                state.x_prev = std::mem::replace(&mut state.x, x_new);
                return Ok(fail(&trace, &state, &best_matrix, iter + 1, e));
            }
        };
        record_success!(&x_new, iter + 1);
        if g_new > state.g_max {
            state.g_max = g_new;
            state.x_max = x_new.clone();
            grad_max = grad_new.clone();
            best_matrix = Some(lm_new);
        }
        state.x_prev = std::mem::replace(&mut state.x, x_new);
        grad_cur = grad_new;

        let mut g_final = g_new;
        if next_ckpt < schedule.len() && schedule[next_ckpt] == iter {
            let w_prev = schedule[next_ckpt - 1];
            // Strict increases over the window (w_prev, iter].
            let n_inc = (w_prev..iter)
                .filter(|&i| g_trace[i + 1] > g_trace[i])
                .count();
            state.success_count_since_checkpoint = n_inc;
            let cond1 = (n_inc as f64) < cfg.rho * (iter - w_prev) as f64;
            let cond2 =
                state.eta == state.eta_at_checkpoint && state.g_max == state.gmax_at_checkpoint;
            // Snapshots are taken before any halving, so a halving here
            // suppresses condition 2 at the next checkpoint.
            state.eta_at_checkpoint = state.eta;
            state.gmax_at_checkpoint = state.g_max;
            if cond1 || cond2 {
                state.eta /= 2.0;
                state.x = state.x_max.clone();
                grad_cur = grad_max.clone();
                g_final = state.g_max;
            }
            next_ckpt += 1;
        }
        push_trace!(iter + 1, g_final);
        if cfg.early_stop && state.first_success.is_some() {
            break;
        }
    }
    Ok(finish(state, x, trace, best_matrix))
}

fn finish(
    state: AttackState,
    x: &[f64],
    trace: Vec<TracePoint>,
    best_matrix: Option<LossMatrix>,
) -> AttackOutcome {
    AttackOutcome {
        final_deltas: deltas_of(&state.x, x),
        best_deltas: deltas_of(&state.x_max, x),
        success: state.first_success.is_some(),
        first_success: state.first_success,
        trace,
        loss_values: best_matrix,
        failure: None,
    }
}
