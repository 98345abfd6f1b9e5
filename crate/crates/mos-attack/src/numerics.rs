//! Vector/matrix primitives, numerically stable smooth max/min operators,
//! and the central-difference gradient oracle the test suites lean on.
//!
//! The smooth operators are plain log-sum-exp with a temperature:
//!
//! ```text
//! smooth_max(x, mu) =  mu * ln( sum_i exp( x_i / mu) )
//! smooth_min(x, mu) = -mu * ln( sum_i exp(-x_i / mu) )
//! ```
//!
//! Both are always evaluated with a max shift so inputs up to |x| ~ 1e6 never
//! overflow an intermediate exponential.

use crate::{Error, Result};

/// `scale * ln(sum_i exp(x_i / scale))`, max-shifted.
///
/// The shift makes every exponent non-positive, so the sum stays in
/// `[1, n]` and the result is exact up to rounding even for entries around
/// `±1e6`.
pub fn log_sum_exp(xs: &[f64], scale: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument(
            "log_sum_exp of an empty vector".into(),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log_sum_exp scale must be positive, got {scale}"
        )));
    }
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "log_sum_exp input contains a non-finite entry: {x}"
            )));
        }
        if x > max {
            max = x;
        }
    }
    let sum: f64 = xs.iter().map(|&x| ((x - max) / scale).exp()).sum();
    Ok(max + scale * sum.ln())
}

/// Smooth maximum: alias of [`log_sum_exp`].
///
/// Satisfies `max(xs) <= smooth_max(xs, mu) <= max(xs) + mu * ln(len(xs))`.
pub fn smooth_max(xs: &[f64], mu: f64) -> Result<f64> {
    log_sum_exp(xs, mu)
}

/// Smooth minimum: `-mu * ln(sum_i exp(-x_i / mu))`.
///
/// Satisfies `min(xs) - mu * ln(len(xs)) <= smooth_min(xs, mu) <= min(xs)`,
/// and equals `-smooth_max(-xs, mu)` exactly.
pub fn smooth_min(xs: &[f64], mu: f64) -> Result<f64> {
    let negated: Vec<f64> = xs.iter().map(|&x| -x).collect();
    Ok(-log_sum_exp(&negated, mu)?)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// This is the independent oracle every analytic gradient in the crate is
/// checked against. Any non-finite function value is reported as an error
/// rather than silently propagated into the differences.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_grad step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad saw a non-finite value at coordinate {i}: f+={hi}, f-={lo}"
            )));
        }
        grad.push((hi - lo) / (2.0 * h));
    }
    Ok(grad)
}

/// Dense row-major matrix. Just enough linear algebra for this pipeline; no
/// broadcasting, no views.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                v.len()
            )));
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            out.push(row.iter().zip(v).map(|(a, b)| a * b).sum());
        }
        Ok(out)
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch(format!(
                "matvec_t: matrix has {} rows, vector has {}",
                self.rows,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let vr = v[r];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vr;
            }
        }
        Ok(out)
    }
}
