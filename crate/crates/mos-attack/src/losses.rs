//! The eight surrogate loss functions, each `(logits, label) -> scalar` with
//! an analytic gradient w.r.t. the logits, behind a uniform integer registry.
//!
//! | id | loss |
//! |----|------|
//! | 0  | cross entropy `-h_y + ln(sum_i exp(h_i))` |
//! | 1  | margin `-h_y + max_{j != y} h_j` |
//! | 2  | difference of logits ratio (margin / (h_(1) - h_(3))) |
//! | 3  | boosted cross entropy `-ln p_y - ln(1 - max_{j != y} p_j)` |
//! | 4  | `sum_i exp(10 p_i / max_j p_j)` |
//! | 5  | `exp(-max softmax(h + 2 softmax(5h)))` |
//! | 6  | `softmax(-softmax(2 exp(h) ⊙ h)) · (softmax(2h) + 2 onehot(y))` |
//! | 7  | `‖softmax(softmax(2h) + h - onehot(y)) - onehot(y)‖²` |
//!
//! All eight are *maximized* by the attack; no sign conventions are applied
//! on top of the formulas. Where a formula selects an argmax or a sorted
//! index, the gradient treats that selection as locally constant, so the
//! gradients are exact away from ties.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Identifier of one of the eight registered losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LossId(u8);

impl LossId {
    pub const COUNT: usize = 8;

    /// All eight ids in registry order.
    pub const ALL: [LossId; 8] = [
        LossId(0),
        LossId(1),
        LossId(2),
        LossId(3),
        LossId(4),
        LossId(5),
        LossId(6),
        LossId(7),
    ];

    pub fn new(id: u8) -> Result<Self> {
        if id < Self::COUNT as u8 {
            Ok(LossId(id))
        } else {
            Err(Error::InvalidArgument(format!(
                "loss id must be in 0..{}, got {id}",
                Self::COUNT
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Short name used in logs and reports.
    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "cross-entropy",
            1 => "margin",
            2 => "dlr",
            3 => "boosted-ce",
            4 => "searched-1",
            5 => "searched-2",
            6 => "searched-3",
            _ => "searched-4",
        }
    }

    /// Smallest number of classes the formula is defined for.
    pub fn min_classes(self) -> usize {
        if self.0 == 2 {
            3
        } else {
            2
        }
    }
}

impl TryFrom<u8> for LossId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        LossId::new(v)
    }
}

impl From<LossId> for u8 {
    fn from(v: LossId) -> u8 {
        v.0
    }
}

impl std::fmt::Display for LossId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Max-shifted softmax; sums to 1 within 1e-12.
pub fn softmax(h: &[f64]) -> Vec<f64> {
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = h.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Precomputed per-logits context shared by every loss evaluation: softmax
/// probabilities, the descending sort permutation, and the one-hot label.
#[derive(Debug, Clone)]
pub struct LogitContext {
    pub h: Vec<f64>,
    pub y: usize,
    pub p: Vec<f64>,
    /// Indices of logits sorted descending (ties keep lower index first).
    pub pi: Vec<usize>,
    pub y_onehot: Vec<f64>,
}

impl LogitContext {
    pub fn new(h: Vec<f64>, y: usize) -> Result<Self> {
        if h.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 logits, got {}",
                h.len()
            )));
        }
        if y >= h.len() {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                h.len()
            )));
        }
        if let Some(bad) = h.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "logits contain a non-finite entry: {bad}"
            )));
        }
        let p = softmax(&h);
        let mut pi: Vec<usize> = (0..h.len()).collect();
        pi.sort_by(|&a, &b| h[b].partial_cmp(&h[a]).unwrap().then(a.cmp(&b)));
        let mut y_onehot = vec![0.0; h.len()];
        y_onehot[y] = 1.0;
        Ok(Self {
            h,
            y,
            p,
            pi,
            y_onehot,
        })
    }

    pub fn classes(&self) -> usize {
        self.h.len()
    }

    /// Index of the largest logit among classes other than `y`.
    fn best_other_logit(&self) -> usize {
        self.pi
            .iter()
            .copied()
            .find(|&j| j != self.y)
            .expect("at least two classes")
    }

    /// Index of the largest probability among classes other than `y`.
    /// Softmax is monotone, so this coincides with `best_other_logit`.
    fn best_other_prob(&self) -> usize {
        self.best_other_logit()
    }
}

const PROB_CLAMP: f64 = 1e-12;
const DLR_GUARD: f64 = 1e-12;

fn check_supported(id: LossId, ctx: &LogitContext) -> Result<()> {
    if ctx.classes() < id.min_classes() {
        return Err(Error::UnsupportedLoss {
            id: id.0,
            reason: format!(
                "needs at least {} classes, got {}",
                id.min_classes(),
                ctx.classes()
            ),
        });
    }
    Ok(())
}

fn finite_or_err(id: LossId, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericLoss {
            id: id.0,
            detail: format!("value {v} is not finite"),
        })
    }
}
/// Evaluate loss `id` on the given logits context.
pub fn eval_loss(id: LossId, ctx: &LogitContext) -> Result<f64> {
    Ok(eval_loss_and_grad(id, ctx)?.0)
}

/// Analytic gradient of [`eval_loss`] w.r.t. the logits.
///
/// Non-smooth selections (argmax over other classes, sorted-index picks)
/// are held fixed at their current value, so the result is the exact
/// gradient away from ties.
pub fn grad_loss_logits(id: LossId, ctx: &LogitContext) -> Result<Vec<f64>> {
    Ok(eval_loss_and_grad(id, ctx)?.1)
}

/// Vector-Jacobian product of softmax: given `u = dL/dp` at `p = softmax(v)`,
/// returns `dL/dv = p ⊙ (u - <p, u>)`.
fn softmax_vjp(p: &[f64], u: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
    p.iter().zip(u).map(|(&pi, &ui)| pi * (ui - dot)).collect()
}

/// Loss value and logits gradient in one pass; the formulas for losses 4-7
/// share softmax intermediates between the two, which matters in the attack
/// inner loop where every loss is evaluated with its gradient per member.
pub fn eval_loss_and_grad(id: LossId, ctx: &LogitContext) -> Result<(f64, Vec<f64>)> {
    check_supported(id, ctx)?;
    let h = &ctx.h;
    let p = &ctx.p;
    let y = ctx.y;
    let c = ctx.classes();
    let (value, grad) = match id.0 {
        0 => {
            let lse = crate::numerics::log_sum_exp(h, 1.0)?;
            let grad = p
                .iter()
                .zip(&ctx.y_onehot)
                .map(|(&pi, &oi)| pi - oi)
                .collect();
            (-h[y] + lse, grad)
        }
        1 => {
            let j = ctx.best_other_logit();
            let mut g = vec![0.0; c];
            g[j] += 1.0;
            g[y] -= 1.0;
            (-h[y] + h[j], g)
        }
        2 => {
            let j = ctx.best_other_logit();
            let (pi1, pi3) = (ctx.pi[0], ctx.pi[2]);
            let num = -h[y] + h[j];
            let den = h[pi1] - h[pi3] + DLR_GUARD;
            let mut g = vec![0.0; c];
            g[j] += 1.0 / den;
            g[y] -= 1.0 / den;
            g[pi1] -= num / (den * den);
            g[pi3] += num / (den * den);
            (num / den, g)
        }
        3 => {
            let j = ctx.best_other_prob();
            let py = p[y].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let pj = p[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let mut u = vec![0.0; c];
            // Clamped coordinates have zero local derivative.
            if p[y] > PROB_CLAMP && p[y] < 1.0 - PROB_CLAMP {
                u[y] -= 1.0 / p[y];
            }
            if p[j] > PROB_CLAMP && p[j] < 1.0 - PROB_CLAMP {
                u[j] += 1.0 / (1.0 - p[j]);
            }
            (-py.ln() - (1.0 - pj).ln(), softmax_vjp(p, &u))
        }
        4 => {
            let jstar = ctx.pi[0];
            let pmax = p[jstar];
            let t: Vec<f64> = p.iter().map(|&pi| (10.0 * pi / pmax).exp()).collect();
            let value = t.iter().sum();
            let mut u: Vec<f64> = t.iter().map(|&ti| 10.0 / pmax * ti).collect();
            // The max coordinate moves every ratio p_i / p_max at once; its
            // own ratio is pinned at 1.
            let rest: f64 = p
                .iter()
                .zip(&t)
                .enumerate()
                .filter(|&(i, _)| i != jstar)
                .map(|(_, (&pi, &ti))| pi * ti)
                .sum();
            u[jstar] = -(10.0 / (pmax * pmax)) * rest;
            (value, softmax_vjp(p, &u))
        }
        5 => {
            let a = softmax(&h.iter().map(|&v| 5.0 * v).collect::<Vec<_>>());
            let v: Vec<f64> = h.iter().zip(&a).map(|(&hi, &ai)| hi + 2.0 * ai).collect();
            let q = softmax(&v);
            let istar = (0..c)
                .max_by(|&i, &j| q[i].partial_cmp(&q[j]).unwrap().then(j.cmp(&i)))
                .unwrap();
            let value = (-q[istar]).exp();
            // dL/dv = -L * q_i* (e_i* - q)
            let w: Vec<f64> = (0..c)
                .map(|i| {
                    let e = if i == istar { 1.0 } else { 0.0 };
                    -value * q[istar] * (e - q[i])
                })
                .collect();
            // dv/dh = I + 10 J_softmax(5h)
            let back = softmax_vjp(&a, &w);
            let g = w
                .iter()
                .zip(&back)
                .map(|(&wi, &bi)| wi + 10.0 * bi)
                .collect();
            (value, g)
        }
        6 => {
            let eh: Vec<f64> = h.iter().map(|&hi| hi.exp()).collect();
            let t: Vec<f64> = eh.iter().zip(h).map(|(&e, &hi)| 2.0 * e * hi).collect();
            let b = softmax(&t);
            let s1 = softmax(&b.iter().map(|&bi| -bi).collect::<Vec<_>>());
            let cx = softmax(&h.iter().map(|&hi| 2.0 * hi).collect::<Vec<_>>());
            let s2: Vec<f64> = cx
                .iter()
                .zip(&ctx.y_onehot)
                .map(|(&ci, &oi)| ci + 2.0 * oi)
                .collect();
            let value = s1.iter().zip(&s2).map(|(a, b)| a * b).sum();
            // Path through softmax(2h).
            let g2: Vec<f64> = softmax_vjp(&cx, &s1).iter().map(|&v| 2.0 * v).collect();
            // Path through s1 = softmax(-softmax(t)).
            let w1 = softmax_vjp(&s1, &s2);
            let dt: Vec<f64> = softmax_vjp(&b, &w1).iter().map(|&v| -v).collect();
            let g1: Vec<f64> = dt
                .iter()
                .zip(eh.iter().zip(h))
                .map(|(&d, (&e, &hi))| d * 2.0 * e * (hi + 1.0))
                .collect();
            let g = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            (value, g)
        }
        _ => {
            let cx = softmax(&h.iter().map(|&hi| 2.0 * hi).collect::<Vec<_>>());
            let v: Vec<f64> = cx
                .iter()
                .zip(h.iter().zip(&ctx.y_onehot))
                .map(|(&ci, (&hi, &oi))| ci + hi - oi)
                .collect();
            let q = softmax(&v);
            let value = q
                .iter()
                .zip(&ctx.y_onehot)
                .map(|(&qi, &oi)| (qi - oi) * (qi - oi))
                .sum();
            let r: Vec<f64> = q
                .iter()
                .zip(&ctx.y_onehot)
                .map(|(&qi, &oi)| 2.0 * (qi - oi))
                .collect();
            let w = softmax_vjp(&q, &r);
            let back = softmax_vjp(&cx, &w);
            let g = w
                .iter()
                .zip(&back)
                .map(|(&wi, &bi)| wi + 2.0 * bi)
                .collect();
            (value, g)
        }
    };
    let value = finite_or_err(id, value)?;
    if let Some(bad) = grad.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericLoss {
            id: id.0,
            detail: format!("gradient contains a non-finite entry: {bad}"),
        });
    }
    Ok((value, grad))
}
