//! Row-wise softmax with temperature and its first two derivatives.
//!
//! The map acts independently on every row, so the Jacobian and Hessian are
//! block diagonal; only per-row blocks are ever formed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, usage, Result};
use crate::linalg::{dot, Matrix};

/// Spectral bound on `diag(s) − s sᵀ` for any probability vector `s`.
pub const JACOBIAN_BOUND: f64 = 2.0;

/// Global Hessian bound `6t²` of the row-softmax map on `t` tokens.
pub fn hessian_bound(t: usize) -> f64 {
    6.0 * (t * t) as f64
}

const PROBABILITY_TOL: f64 = 1e-9;

/// Softmax of one row written into `out`; subtracts the row max first.
pub fn softmax_into(row: &[f64], beta: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &m) in out.iter_mut().zip(row) {
        *o = libm::exp(beta * (m - max));
        total += *o;
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `[RowSoftMax_β(M)]_ij = exp(β M_ij) / Σ_k exp(β M_ik)`.
pub fn row_softmax(m: &Matrix, beta: f64) -> Result<Matrix> {
    check_beta(beta)?;
    if !m.is_finite() {
        return Err(domain("score matrix has a non-finite entry"));
    }
    let mut s = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_into(m.row(i), beta, s.row_mut(i));
    }
    Ok(s)
}

/// Per-row Jacobian `β (diag(s) − s sᵀ)`.
pub fn softmax_jacobian_row(s: &[f64], beta: f64) -> Result<Matrix> {
    check_beta(beta)?;
    check_probability(s)?;
    let t = s.len();
    Ok(Matrix::from_fn(t, t, |j, k| {
        let diag = if j == k { s[j] } else { 0.0 };
        beta * (diag - s[j] * s[k])
    }))
}

/// `∂²S_j / ∂M_k ∂M_l` for one softmax row (0-based indices).
pub fn softmax_hessian_entry(s: &[f64], beta: f64, j: usize, k: usize, l: usize) -> Result<f64> {
    let t = s.len();
    if j >= t || k >= t || l >= t {
        return Err(usage(format!(
            "hessian index ({j}, {k}, {l}) out of range for t = {t}"
        )));
    }
    check_beta(beta)?;
    check_probability(s)?;
    Ok(hessian_entry_unchecked(s, beta, j, k, l))
}

#[inline]
fn hessian_entry_unchecked(s: &[f64], beta: f64, j: usize, k: usize, l: usize) -> f64 {
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    beta * beta
        * s[j]
        * (2.0 * s[k] * s[l] + delta(j, k) * delta(j, l)
            - delta(k, l) * s[k]
            - delta(j, k) * s[l]
            - delta(j, l) * s[k])
}

/// The full `t×t×t` Hessian of one row, indexed `[(j * t + k) * t + l]`.
pub fn softmax_hessian_row_tensor(s: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_probability(s)?;
    let t = s.len();
    let mut out = Vec::with_capacity(t * t * t);
    for j in 0..t {
        for k in 0..t {
            for l in 0..t {
                out.push(hessian_entry_unchecked(s, beta, j, k, l));
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product for one row: `Jᵀ g = β s ⊙ (g − ⟨s, g⟩)`.
///
/// The Jacobian is symmetric, so this is also the Jacobian-vector product.
#[inline]
pub fn softmax_vjp_row(s: &[f64], g: &[f64], beta: f64, out: &mut [f64]) {
    let mean = dot(s, g);
    for ((o, &si), &gi) in out.iter_mut().zip(s).zip(g) {
        *o = beta * si * (gi - mean);
    }
}

/// Second directional derivative `Σ_kl H_jkl m_k m_l` of one row along `m`.
#[inline]
pub fn softmax_second_directional_row(s: &[f64], m: &[f64], beta: f64, out: &mut [f64]) {
    let mean = dot(s, m);
    let second_moment: f64 = s.iter().zip(m).map(|(si, mi)| si * mi * mi).sum();
    let var = second_moment - mean * mean;
    for ((o, &si), &mi) in out.iter_mut().zip(s).zip(m) {
        let c = mi - mean;
        *o = beta * beta * si * (c * c - var);
    }
}

/// Backpropagates `∇_S ℓ` to `∇_M ℓ` row by row.
pub fn row_softmax_backward(s: &Matrix, grad_s: &Matrix, beta: f64) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    let mut buf = vec![0.0; s.cols()];
    for i in 0..s.rows() {
        softmax_vjp_row(s.row(i), grad_s.row(i), beta, &mut buf);
        out.row_mut(i).copy_from_slice(&buf);
    }
    out
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(domain(format!(
            "softmax temperature must be positive, got {beta}"
        )));
    }
    Ok(())
}

fn check_probability(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(domain("empty probability vector"));
    }
    if s.iter()
        .any(|&v| !(-PROBABILITY_TOL..=1.0 + PROBABILITY_TOL).contains(&v))
    {
        return Err(domain("probability vector entry outside [0, 1]"));
    }
    let total: f64 = s.iter().sum();
    if libm::fabs(total - 1.0) > PROBABILITY_TOL {
        return Err(domain(format!("probability vector sums to {total}")));
    }
    Ok(())
}
