//! Automated mining of loss-synergy patterns from a finished attack.
//!
//! Given the normalized loss matrix of one attacked point, the miner asks
//! which subset of the `K` perturbations suffices to preserve each loss's
//! maximum. That subset-selection problem is relaxed: the hard `max` becomes
//! a log-sum-exp, the 0-norm becomes a 1-norm, and the binary indicator
//! `beta` becomes a box-constrained vector solved by projected gradient
//! descent, then thresholded back to binary. Each selected ("dominant")
//! perturbation is then labeled with the set of losses it nearly maximizes;
//! those label sets are the synergy patterns aggregated across a dataset.

use crate::objective::LossMatrix;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Miner parameters. `lambda` weighs sparsity against the preserved-maximum
/// gap, `binarize_threshold` (T) turns the relaxed indicator binary,
/// `contribution_threshold` (C) decides which losses a dominant example
/// counts toward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinerConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_binarize")]
    pub binarize_threshold: f64,
    #[serde(default = "default_contribution")]
    pub contribution_threshold: f64,
    /// Smoothing temperature; mirrors the attack's default.
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_binarize() -> f64 {
    0.85
}
fn default_contribution() -> f64 {
    0.75
}
fn default_mu() -> f64 {
    1.0
}
fn default_steps() -> usize {
    500
}
fn default_step_size() -> f64 {
    0.1
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            binarize_threshold: default_binarize(),
            contribution_threshold: default_contribution(),
            mu: default_mu(),
            steps: default_steps(),
            step_size: default_step_size(),
            seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::Error::InvalidArgument;
        if self.lambda < 0.0 {
            return Err(InvalidArgument("lambda must be non-negative".into()));
        }
        for (name, v) in [
            ("binarize threshold", self.binarize_threshold),
            ("contribution threshold", self.contribution_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(InvalidArgument(format!("{name} {v} not in (0,1)")));
            }
        }
        if !(self.mu > 0.0) {
            return Err(InvalidArgument("mu must be positive".into()));
        }
        if self.steps == 0 || !(self.step_size > 0.0) {
            return Err(InvalidArgument(
                "need steps >= 1 and positive step size".into(),
            ));
        }
        Ok(())
    }
}

/// Per-row min-max normalized loss matrix with entries in `[0,1]`. Rows that
/// were constant normalize to all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLossMatrix {
    m: usize,
    k: usize,
    values: Vec<f64>,
}

impl NormalizedLossMatrix {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    /// Build directly from pre-normalized rows (entries must lie in [0,1]).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let lm = LossMatrix::from_rows(rows)?;
        if lm.rows_iter().flatten().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "normalized loss values must lie in [0,1]".into(),
            ));
        }
        Ok(Self {
            m: lm.m(),
            k: lm.k(),
            values: (0..lm.m()).flat_map(|i| lm.row(i).to_vec()).collect(),
        })
    }
}

/// Min-max normalize each row of `f` over its own `K` values.
pub fn normalize_losses(f: &LossMatrix) -> NormalizedLossMatrix {
    let (m, k) = (f.m(), f.k());
    let mut values = Vec::with_capacity(m * k);
    for row in f.rows_iter() {
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            values.extend(row.iter().map(|&v| (v - lo) / (hi - lo)));
        } else {
            values.extend(std::iter::repeat(0.0).take(k));
        }
    }
    NormalizedLossMatrix { m, k, values }
}

/// The relaxed subset objective and its gradient w.r.t. `beta`:
///
/// ```text
/// sum_i mu * ln( sum_k e^{fbar_ik / mu} / sum_k e^{beta_k fbar_ik / mu} )
///   + lambda * sum_k beta_k
/// ```
///
/// `beta` must lie in `[0,1]^K`, so the 1-norm is a plain sum.
pub fn relaxed_objective(
    fbar: &NormalizedLossMatrix,
    beta: &[f64],
    cfg: &MinerConfig,
) -> Result<(f64, Vec<f64>)> {
    if beta.len() != fbar.k() {
        return Err(Error::ShapeMismatch(format!(
            "beta has {} entries, matrix has K={}",
            beta.len(),
            fbar.k()
        )));
    }
    if beta.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
        return Err(Error::InvalidArgument("beta must lie in [0,1]".into()));
    }
    let mu = cfg.mu;
    let mut value = cfg.lambda * beta.iter().sum::<f64>();
    let mut grad = vec![cfg.lambda; beta.len()];
    for i in 0..fbar.m() {
        let row = fbar.row(i);
        let full = crate::numerics::log_sum_exp(row, mu)?;
        let masked_args: Vec<f64> = row.iter().zip(beta).map(|(&v, &b)| b * v).collect();
        let masked = crate::numerics::log_sum_exp(&masked_args, mu)?;
        value += full - masked;
        // Softmax weights of the masked row.
        let shift = masked_args
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = masked_args
            .iter()
            .map(|&v| ((v - shift) / mu).exp())
            .collect();
        let denom: f64 = exps.iter().sum();
        for ((g, &v), e) in grad.iter_mut().zip(row).zip(&exps) {
            *g -= v * e / denom;
        }
    }
    if !value.is_finite() {
        return Err(Error::Miner(format!("relaxed objective is {value}")));
    }
    Ok((value, grad))
}

fn binarize(beta: &[f64], threshold: f64) -> Vec<bool> {
    beta.iter().map(|&b| b >= threshold).collect()
}

fn run_pgd(fbar: &NormalizedLossMatrix, start: Vec<f64>, cfg: &MinerConfig) -> Result<Vec<f64>> {
    let mut beta = start;
    for _ in 0..cfg.steps {
        let (_, grad) = relaxed_objective(fbar, &beta, cfg)?;
        for (b, g) in beta.iter_mut().zip(&grad) {
            *b = (*b - cfg.step_size * g).clamp(0.0, 1.0);
        }
    }
    Ok(beta)
}

fn relaxed_at_binary(fbar: &NormalizedLossMatrix, beta: &[bool], cfg: &MinerConfig) -> Result<f64> {
    let b: Vec<f64> = beta.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
    Ok(relaxed_objective(fbar, &b, cfg)?.0)
}

/// Select the dominant perturbations by projected gradient descent on
/// [`relaxed_objective`] over `[0,1]^K`, then thresholding at
/// `binarize_threshold`.
///
/// Runs use the all-ones start (with a deterministic 1e-9 tilt that favors
/// later columns, so exact column ties resolve the same way as the
/// lexicographic tie-break of [`exhaustive_dominant`]) plus one start per
/// single column; the binarized candidate with the lowest relaxed objective
/// wins, ties resolved lexicographically.
pub fn mine_dominant(fbar: &NormalizedLossMatrix, cfg: &MinerConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let k = fbar.k();
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    starts.push((0..k).map(|j| 1.0 - 1e-9 * (k - 1 - j) as f64).collect());
    for j in 0..k {
        let mut s = vec![0.0; k];
        s[j] = 1.0;
        starts.push(s);
    }
    let mut best: Option<(f64, Vec<bool>)> = None;
    for start in starts {
        let relaxed = run_pgd(fbar, start, cfg)?;
        let candidate = binarize(&relaxed, cfg.binarize_threshold);
        let value = relaxed_at_binary(fbar, &candidate, cfg)?;
        best = match best {
            None => Some((value, candidate)),
            Some((bv, bc)) => {
                if value < bv - 1e-12 || ((value - bv).abs() <= 1e-12 && candidate < bc) {
                    Some((value, candidate))
                } else {
                    Some((bv, bc))
                }
            }
        };
    }
    Ok(best.expect("at least one start").1)
}

/// Enumerate all `2^K` binary indicator vectors, score each with the relaxed
/// objective, and return the minimizer (lexicographically first on ties).
/// Exponential; intended as the test oracle for `K <= 12`.
pub fn exhaustive_dominant(fbar: &NormalizedLossMatrix, cfg: &MinerConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let k = fbar.k();
    if k > 16 {
        return Err(Error::InvalidArgument(format!(
            "exhaustive enumeration over 2^{k} candidates refused"
        )));
    }
    let mut best: Option<(f64, Vec<bool>)> = None;
    for mask in 0u32..(1 << k) {
        let beta: Vec<bool> = (0..k).map(|j| mask >> j & 1 == 1).collect();
        let value = relaxed_at_binary(fbar, &beta, cfg)?;
        best = match best {
            None => Some((value, beta)),
            Some((bv, bc)) => {
                if value < bv || (value == bv && beta < bc) {
                    Some((value, beta))
                } else {
                    Some((bv, bc))
                }
            }
        };
    }
    Ok(best.expect("non-empty enumeration").1)
}

/// The mined indicator plus, per dominant example, the set of losses it
/// contributes to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub beta: Vec<bool>,
    /// One sorted loss-index set per dominant example, in column order.
    pub masks: Vec<Vec<usize>>,
}

/// For each selected column `k`, collect
/// `{ i : fbar[i][k] > C * max_k' fbar[i][k'] }`. Rows whose maximum is zero
/// contribute to no mask.
pub fn extract_patterns(
    fbar: &NormalizedLossMatrix,
    beta: &[bool],
    cfg: &MinerConfig,
) -> Result<PatternRecord> {
    if beta.len() != fbar.k() {
        return Err(Error::ShapeMismatch(format!(
            "beta has {} entries, matrix has K={}",
            beta.len(),
            fbar.k()
        )));
    }
    let row_max: Vec<f64> = (0..fbar.m())
        .map(|i| {
            fbar.row(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut masks = Vec::new();
    for (k, &selected) in beta.iter().enumerate() {
        if !selected {
            continue;
        }
        let mask: Vec<usize> = (0..fbar.m())
            .filter(|&i| {
                row_max[i] > 0.0 && fbar.get(i, k) > cfg.contribution_threshold * row_max[i]
            })
            .collect();
        masks.push(mask);
    }
    Ok(PatternRecord {
        beta: beta.to_vec(),
        masks,
    })
}

/// One aggregated pattern: the loss set, its display key (`"0+1+2"`), raw
/// count, and share of all dominant examples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternCount {
    pub mask: Vec<usize>,
    pub key: String,
    pub count: u64,
    pub percent: f64,
}

/// Histogram of synergy patterns across a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternHistogram {
    /// Total dominant examples counted.
    pub total: u64,
    /// Patterns sorted by decreasing count (key ascending on ties).
    pub patterns: Vec<PatternCount>,
    /// Share of dominant examples contributing to every loss, in percent.
    pub all_losses_percent: f64,
}

impl PatternHistogram {
    /// Patterns at or above `min_percent`.
    pub fn filtered(&self, min_percent: f64) -> Vec<&PatternCount> {
        self.patterns
            .iter()
            .filter(|p| p.percent >= min_percent)
            .collect()
    }
}

pub fn mask_key(mask: &[usize]) -> String {
    mask.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

/// Count every mask across all dominant examples of all records. `m` is the
/// number of losses (used for the all-losses share).
pub fn aggregate_patterns(records: &[PatternRecord], m: usize) -> PatternHistogram {
    let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    let mut total = 0u64;
    for rec in records {
        for mask in &rec.masks {
            *counts.entry(mask.clone()).or_insert(0) += 1;
            total += 1;
        }
    }
    let full: Vec<usize> = (0..m).collect();
    let all_count = counts.get(&full).copied().unwrap_or(0);
    let mut patterns: Vec<PatternCount> = counts
        .into_iter()
        .map(|(mask, count)| PatternCount {
            key: mask_key(&mask),
            percent: if total > 0 {
                100.0 * count as f64 / total as f64
            } else {
                0.0
            },
            mask,
            count,
        })
        .collect();
    patterns.sort_by(|a, b| b.count.cmp(&a.count).then(a.key.cmp(&b.key)));
    PatternHistogram {
        total,
        patterns,
        all_losses_percent: if total > 0 {
            100.0 * all_count as f64 / total as f64
        } else {
            0.0
        },
    }
}
