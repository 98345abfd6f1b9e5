//! Scalarizations of the per-loss / per-perturbation value matrix.
//!
//! Given `m` losses and a set of `K` perturbations, the matrix
//! `F[i][k] = f_i(delta_k)` feeds four objectives:
//!
//! - [`tchebycheff`]: the classic weighted min-distance-to-ideal scalarizer
//!   for a single point (kept as the reference decomposition subproblem);
//! - [`set_objective_exact`]: `min_i w_i |max_k F[i][k] - z*_i|`, the
//!   non-smooth set objective used only as a bound oracle in tests;
//! - [`set_objective_smooth`]: the same expression with both `max` and `min`
//!   replaced by their log-sum-exp smoothings (weights and ideal point kept);
//! - [`set_objective_simplified`]: the zero-ideal, uniform-weight form
//!   `-mu ln( sum_i (sum_k e^{F[i][k]/mu})^{-1} )`, which is exactly
//!   `smooth_min_i(smooth_max_k(F[i,:]))` and is what the attack maximizes.
//!
//! The absolute values in the smooth form are dropped in the simplified
//! form. With strongly negative losses (margin and DLR can be negative) the
//! two genuinely diverge; both are provided, and the attack uses the
//! simplified one.

use crate::classifier::{ClassifierWeights, LabeledPoint};
use crate::losses::{self, LogitContext, LossId};
use crate::numerics::{smooth_max, smooth_min};
use crate::{Error, Result};

/// The `K` perturbation vectors jointly optimized for one input. Feasibility
/// (`‖delta‖_inf <= eps`, `x + delta` in the unit box) is maintained by the
/// attack loop, not checked at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    deltas: Vec<Vec<f64>>,
}

impl PerturbationSet {
    pub fn new(deltas: Vec<Vec<f64>>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::InvalidArgument(
                "perturbation set needs K >= 1".into(),
            ));
        }
        let d = deltas[0].len();
        if deltas.iter().any(|v| v.len() != d) {
            return Err(Error::ShapeMismatch(
                "perturbation vectors have mixed lengths".into(),
            ));
        }
        Ok(Self { deltas })
    }

    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            deltas: vec![vec![0.0; dim]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.deltas.len()
    }

    pub fn dim(&self) -> usize {
        self.deltas[0].len()
    }

    pub fn deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.deltas[k]
    }
}

/// Row-major `m x K` matrix of loss values `F[i][k] = f_i(delta_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    m: usize,
    k: usize,
    values: Vec<f64>,
}

impl LossMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::InvalidArgument(
                "loss matrix must be non-empty".into(),
            ));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("ragged loss matrix".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("loss matrix has non-finite entries".into()));
        }
        Ok(Self {
            m: values.len() / k,
            k,
            values,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.k)
    }
}

/// Weights, ideal point, and smoothing temperature for the scalarizers.
#[derive(Debug, Clone)]
pub struct ScalarizationParams {
    pub weights: Vec<f64>,
    pub ideal: Vec<f64>,
    pub mu: f64,
}

impl ScalarizationParams {
    pub fn new(weights: Vec<f64>, ideal: Vec<f64>, mu: f64) -> Result<Self> {
        if weights.len() != ideal.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights vs {} ideal entries",
                weights.len(),
                ideal.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        if !(mu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mu must be positive, got {mu}"
            )));
        }
        Ok(Self { weights, ideal, mu })
    }

    /// All-ones weights and zero ideal point for `m` objectives.
    pub fn uniform(m: usize, mu: f64) -> Result<Self> {
        Self::new(vec![1.0; m], vec![0.0; m], mu)
    }

    fn check_m(&self, m: usize) -> Result<()> {
        if self.weights.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "params cover {} objectives, matrix has {m}",
                self.weights.len()
            )));
        }
        Ok(())
    }
}

/// Evaluate every configured loss on every perturbed input:
/// `F[i][k] = loss_i(model(x + delta_k), y)`.
pub fn loss_matrix(
    model: &ClassifierWeights,
    point: &LabeledPoint,
    set: &PerturbationSet,
    loss_ids: &[LossId],
) -> Result<LossMatrix> {
    if loss_ids.is_empty() {
        return Err(Error::InvalidArgument("need at least one loss".into()));
    }
    let mut rows = vec![Vec::with_capacity(set.k()); loss_ids.len()];
    for delta in set.deltas() {
        let xk: Vec<f64> = point.x.iter().zip(delta).map(|(a, b)| a + b).collect();
        let ctx = LogitContext::new(model.forward(&xk)?, point.y)?;
        for (row, &id) in rows.iter_mut().zip(loss_ids) {
            row.push(losses::eval_loss(id, &ctx)?);
        }
    }
    LossMatrix::from_rows(rows)
}

/// `min_i w_i |f_i - z*_i|` for a single objective vector.
pub fn tchebycheff(fvals: &[f64], params: &ScalarizationParams) -> Result<f64> {
    params.check_m(fvals.len())?;
    if fvals.is_empty() {
        return Err(Error::InvalidArgument("empty objective vector".into()));
    }
    Ok(fvals
        .iter()
        .zip(params.weights.iter().zip(&params.ideal))
        .map(|(&f, (&w, &z))| w * (f - z).abs())
        .fold(f64::INFINITY, f64::min))
}

/// Non-smooth set objective `min_i w_i |max_k F[i][k] - z*_i|`.
pub fn set_objective_exact(f: &LossMatrix, params: &ScalarizationParams) -> Result<f64> {
    params.check_m(f.m())?;
    let per_loss: Vec<f64> = f
        .rows_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    tchebycheff(&per_loss, params)
}

/// Smoothed set objective with weights and ideal point:
/// `smooth_min_i( w_i |smooth_max_k(F[i,:], mu) - z*_i|, mu )`.
pub fn set_objective_smooth(f: &LossMatrix, params: &ScalarizationParams) -> Result<f64> {
    params.check_m(f.m())?;
    let mut inner = Vec::with_capacity(f.m());
    for (row, (&w, &z)) in f.rows_iter().zip(params.weights.iter().zip(&params.ideal)) {
        inner.push(w * (smooth_max(row, params.mu)? - z).abs());
    }
    smooth_min(&inner, params.mu)
}

/// The simplified objective the attack maximizes:
/// `-mu ln( sum_i (sum_k e^{F[i][k]/mu})^{-1} )`, i.e. the smooth minimum
/// over rows of each row's smooth maximum, with zero ideal point and uniform
/// weights and no absolute values.
pub fn set_objective_simplified(f: &LossMatrix, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mu must be positive, got {mu}"
        )));
    }
    let mut row_lse = Vec::with_capacity(f.m());
    for row in f.rows_iter() {
        row_lse.push(smooth_max(row, mu)?);
    }
    smooth_min(&row_lse, mu)
}

/// Coefficients `dg/dF[i][k] = sigma_i * omega_{ik}` of the simplified
/// objective: `omega` is the within-row softmax of `F/mu`, `sigma` the
/// softmin weights of the row smooth-maxima. Both are computed max-shifted.
/// Returns `(value, coeffs)` with `coeffs` in the same row-major layout as
/// the loss matrix. The coefficients are non-negative and sum to 1.
fn simplified_value_and_coeffs(f: &LossMatrix, mu: f64) -> Result<(f64, Vec<f64>)> {
    let (m, k) = (f.m(), f.k());
    let mut row_lse = Vec::with_capacity(m);
    let mut omega = vec![0.0; m * k];
    for (i, row) in f.rows_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - max) / mu).exp();
            omega[i * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            omega[i * k + j] /= sum;
        }
        row_lse.push(max + mu * sum.ln());
    }
    let min_lse = row_lse.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sigma = Vec::with_capacity(m);
    let mut sig_sum = 0.0;
    for &s in &row_lse {
        let e = (-(s - min_lse) / mu).exp();
        sigma.push(e);
        sig_sum += e;
    }
    let value = min_lse - mu * sig_sum.ln();
    for (i, s) in sigma.iter().enumerate() {
        let w = s / sig_sum;
        for j in 0..k {
            omega[i * k + j] *= w;
        }
    }
    Ok((value, omega))
}

/// Value, loss matrix, and per-member input gradients of the simplified
/// objective composed with the model and losses.
#[derive(Debug, Clone)]
pub struct SetObjectiveGrad {
    pub value: f64,
    /// Gradient of the objective w.r.t. each `delta_k` (equivalently each
    /// perturbed input, since `d(x + delta)/d delta = I`).
    pub grads: Vec<Vec<f64>>,
    pub loss_matrix: LossMatrix,
}

/// Differentiate [`set_objective_simplified`] ∘ [`loss_matrix`] w.r.t. the
/// perturbation set. Per member `k` the per-loss logit gradients are folded
/// with the scalarization coefficients first, so only one backward pass
/// through the model happens per member.
pub fn grad_set_objective(
    model: &ClassifierWeights,
    point: &LabeledPoint,
    set: &PerturbationSet,
    loss_ids: &[LossId],
    mu: f64,
) -> Result<SetObjectiveGrad> {
    if loss_ids.is_empty() {
        return Err(Error::InvalidArgument("need at least one loss".into()));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mu must be positive, got {mu}"
        )));
    }
    let m = loss_ids.len();
    let k = set.k();
    let classes = model.num_classes();

    // One forward per member; keep contexts and per-loss logit gradients.
    let mut contexts = Vec::with_capacity(k);
    let mut rows = vec![Vec::with_capacity(k); m];
    let mut logit_grads = vec![vec![0.0; classes * k]; m];
    for (kk, delta) in set.deltas().iter().enumerate() {
        let xk: Vec<f64> = point.x.iter().zip(delta).map(|(a, b)| a + b).collect();
        let ctx = LogitContext::new(model.forward(&xk)?, point.y)?;
        for (i, &id) in loss_ids.iter().enumerate() {
            let (value, g) = losses::eval_loss_and_grad(id, &ctx)?;
            rows[i].push(value);
            logit_grads[i][kk * classes..(kk + 1) * classes].copy_from_slice(&g);
        }
        contexts.push(xk);
    }
    let f = LossMatrix::from_rows(rows)?;
    let (value, coeffs) = simplified_value_and_coeffs(&f, mu)?;

    let mut grads = Vec::with_capacity(k);
    for (kk, xk) in contexts.iter().enumerate() {
        let mut u = vec![0.0; classes];
        for i in 0..m {
            let c = coeffs[i * k + kk];
            let g = &logit_grads[i][kk * classes..(kk + 1) * classes];
            for (ui, gi) in u.iter_mut().zip(g) {
                *ui += c * gi;
            }
        }
        grads.push(model.backward_input(xk, &u)?);
    }
    Ok(SetObjectiveGrad {
        value,
        grads,
        loss_matrix: f,
    })
}
