//! Single-head softmax attention regressor with exact gradients and an exact
//! Laplacian in the `(W_Q, W_K)` factor space.
//!
//! For one sample `(X, Y)`:
//!
//! ```text
//! M = X W_Q W_Kᵀ Xᵀ / √d,   S = RowSoftMax_β(M),   Ŷ = S X W_V,   E = Ŷ − Y
//! ℓ = ½ ‖E‖²_F
//! ```
//!
//! `W_V` is a constant of the loss here; only `W_Q` and `W_K` are variables.

pub mod softmax;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, shape, usage, Result};
use crate::linalg::Matrix;

pub use softmax::{
    row_softmax, softmax_hessian_entry, softmax_hessian_row_tensor, softmax_jacobian_row,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSample {
    pub x: Matrix,
    pub y: Matrix,
}

impl AttnSample {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(shape("attention sample needs t >= 1 and d >= 1"));
        }
        if x.shape() != y.shape() {
            return Err(shape(format!(
                "X is {:?} but Y is {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn tokens(&self) -> usize {
        self.x.rows()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }

    pub fn within_bounds(&self, bx: f64, by: f64) -> bool {
        self.x.frobenius() <= bx && self.y.frobenius() <= by
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub beta: f64,
}

impl AttnParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, beta: f64) -> Result<Self> {
        let (d, r) = wq.shape();
        if wk.shape() != (d, r) {
            return Err(shape(format!(
                "W_Q is {:?} but W_K is {:?}",
                wq.shape(),
                wk.shape()
            )));
        }
        if wv.shape() != (d, d) {
            return Err(shape(format!("W_V must be {d}x{d}, got {:?}", wv.shape())));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(domain(format!("beta must be positive, got {beta}")));
        }
        if !(wq.is_finite() && wk.is_finite() && wv.is_finite()) {
            return Err(domain("attention parameters must be finite"));
        }
        Ok(Self { wq, wk, wv, beta })
    }

    /// `(d, r)`
    pub fn dims(&self) -> (usize, usize) {
        self.wq.shape()
    }

    /// Flattened factor point `(W_Q, W_K)`.
    pub fn factor_point(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(2 * self.wq.len());
        t.extend_from_slice(self.wq.as_slice());
        t.extend_from_slice(self.wk.as_slice());
        t
    }

    /// Replaces `(W_Q, W_K)` from a flattened factor point.
    pub fn with_factor_point(&self, t: &[f64]) -> Result<Self> {
        let (d, r) = self.dims();
        if t.len() != 2 * d * r {
            return Err(shape(format!(
                "factor point of length {} for d = {d}, r = {r}",
                t.len()
            )));
        }
        Ok(Self {
            wq: Matrix::from_vec(d, r, t[..d * r].to_vec())?,
            wk: Matrix::from_vec(d, r, t[d * r..].to_vec())?,
            wv: self.wv.clone(),
            beta: self.beta,
        })
    }

    pub fn value_norm_within(&self, bw: f64) -> bool {
        self.wv.frobenius() <= bw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnIntermediates {
    pub m: Matrix,
    pub s: Matrix,
    pub yhat: Matrix,
    pub e: Matrix,
}

/// Gradient with respect to the two factor blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct QkGrad {
    pub wq: Matrix,
    pub wk: Matrix,
}

impl QkGrad {
    pub fn zeros(d: usize, r: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, r),
            wk: Matrix::zeros(d, r),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut g = Vec::with_capacity(2 * self.wq.len());
        g.extend_from_slice(self.wq.as_slice());
        g.extend_from_slice(self.wk.as_slice());
        g
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.wq.frobenius_sq() + self.wk.frobenius_sq())
    }
}

fn check_shapes(sample: &AttnSample, params: &AttnParams) -> Result<()> {
    let (d, _) = params.dims();
    if sample.width() != d {
        return Err(shape(format!(
            "sample width {} does not match parameter width {d}",
            sample.width()
        )));
    }
    Ok(())
}

/// Attention scores `M = X W_Q W_Kᵀ Xᵀ / √d` for an arbitrary token matrix.
pub fn scores(x: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<Matrix> {
    let d = x.cols() as f64;
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let mut m = q.matmul_t(&k)?;
    m.scale_mut(1.0 / libm::sqrt(d));
    Ok(m)
}

pub fn attention_forward(sample: &AttnSample, params: &AttnParams) -> Result<AttnIntermediates> {
    check_shapes(sample, params)?;
    let m = scores(&sample.x, &params.wq, &params.wk)?;
    let s = row_softmax(&m, params.beta)?;
    let yhat = s.matmul(&sample.x.matmul(&params.wv)?)?;
    let e = yhat.sub(&sample.y)?;
    Ok(AttnIntermediates { m, s, yhat, e })
}

/// `ℓ = ½ ‖Y − Ŷ‖²_F`
pub fn sample_loss(sample: &AttnSample, params: &AttnParams) -> Result<f64> {
    Ok(0.5 * attention_forward(sample, params)?.e.frobenius_sq())
}

/// Chains `∇_M ℓ` into the factor gradients:
/// `∇_{W_Q} = Xᵀ ∇_M X W_K / √d` and `∇_{W_K} = Xᵀ (∇_M)ᵀ X W_Q / √d`.
pub fn factor_grads_from_scores(
    x: &Matrix,
    grad_m: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<QkGrad> {
    let inv_sqrt_d = 1.0 / libm::sqrt(x.cols() as f64);
    let k = x.matmul(wk)?;
    let q = x.matmul(wq)?;
    let mut gq = x.t_matmul(&grad_m.matmul(&k)?)?;
    gq.scale_mut(inv_sqrt_d);
    let mut gk = x.t_matmul(&grad_m.t_matmul(&q)?)?;
    gk.scale_mut(inv_sqrt_d);
    Ok(QkGrad { wq: gq, wk: gk })
}

/// Exact `(∇_{W_Q} ℓ, ∇_{W_K} ℓ)` through `∇_S ℓ = E W_Vᵀ Xᵀ` and the
/// per-row softmax Jacobian.
pub fn sample_loss_grad(sample: &AttnSample, params: &AttnParams) -> Result<QkGrad> {
    let inter = attention_forward(sample, params)?;
    let xv = sample.x.matmul(&params.wv)?;
    let grad_s = inter.e.matmul_t(&xv)?;
    let grad_m = softmax::row_softmax_backward(&inter.s, &grad_s, params.beta);
    factor_grads_from_scores(&sample.x, &grad_m, &params.wq, &params.wk)
}

fn check_batch(batch: &[AttnSample], params: &AttnParams) -> Result<()> {
    let first = batch
        .first()
        .ok_or_else(|| usage("empirical risk over an empty batch"))?;
    if batch.iter().any(|s| s.x.shape() != first.x.shape()) {
        return Err(shape("attention batch has mixed sample shapes"));
    }
    check_shapes(first, params)
}

/// `R̂_A = (1/n) Σ ℓ_i`
pub fn empirical_risk(batch: &[AttnSample], params: &AttnParams) -> Result<f64> {
    check_batch(batch, params)?;
    let mut total = 0.0;
    for sample in batch {
        total += sample_loss(sample, params)?;
    }
    Ok(total / batch.len() as f64)
}

pub fn empirical_risk_grad(batch: &[AttnSample], params: &AttnParams) -> Result<QkGrad> {
    check_batch(batch, params)?;
    let (d, r) = params.dims();
    let mut acc = QkGrad::zeros(d, r);
    for sample in batch {
        let g = sample_loss_grad(sample, params)?;
        acc.wq.add_assign(&g.wq)?;
        acc.wk.add_assign(&g.wk)?;
    }
    let inv_n = 1.0 / batch.len() as f64;
    acc.wq.scale_mut(inv_n);
    acc.wk.scale_mut(inv_n);
    Ok(acc)
}

/// Exact Laplacian of `ℓ` over the flattened `(W_Q, W_K)`.
///
/// `M` is linear in each factor separately, so along a single coordinate
/// `∂²ℓ = ‖∂S · XW_V‖² + ⟨∇_S ℓ, ∂²S⟩` with `∂S = J ∂M` and
/// `∂²S = H[∂M, ∂M]` evaluated row by row.
pub fn sample_laplacian(sample: &AttnSample, params: &AttnParams) -> Result<f64> {
    let inter = attention_forward(sample, params)?;
    let x = &sample.x;
    let (t, _) = x.shape();
    let (d, r) = params.dims();
    let beta = params.beta;
    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
    let xv = x.matmul(&params.wv)?;
    let grad_s = inter.e.matmul_t(&xv)?;
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;

    let mut dm_row = vec![0.0; t];
    let mut ds = Matrix::zeros(t, t);
    let mut d2s_row = vec![0.0; t];
    let mut total = 0.0;

    // W_Q[a, b]: ∂M = X[:, a] ⊗ K[:, b] / √d.  W_K[a, b]: ∂M = Q[:, b] ⊗ X[:, a] / √d.
    for block in 0..2 {
        let other = if block == 0 { &k } else { &q };
        for a in 0..d {
            for b in 0..r {
                let mut curvature = 0.0;
                for i in 0..t {
                    for (j, dm) in dm_row.iter_mut().enumerate() {
                        *dm = if block == 0 {
                            x[(i, a)] * other[(j, b)]
                        } else {
                            other[(i, b)] * x[(j, a)]
                        } * inv_sqrt_d;
                    }
                    let s_row = inter.s.row(i);
                    softmax::softmax_vjp_row(s_row, &dm_row, beta, ds.row_mut(i));
                    softmax::softmax_second_directional_row(s_row, &dm_row, beta, &mut d2s_row);
                    curvature += crate::linalg::dot(grad_s.row(i), &d2s_row);
                }
                let dy = ds.matmul(&xv)?;
                curvature += dy.frobenius_sq();
                total += curvature;
            }
        }
    }
    Ok(total)
}

pub fn empirical_risk_laplacian(batch: &[AttnSample], params: &AttnParams) -> Result<f64> {
    check_batch(batch, params)?;
    let mut total = 0.0;
    for sample in batch {
        total += sample_laplacian(sample, params)?;
    }
    Ok(total / batch.len() as f64)
}

/// Data bounds and the explicit gradient / Laplacian constants they imply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionBounds {
    pub bx: f64,
    pub by: f64,
    pub bw: f64,
    pub beta: f64,
    pub t: usize,
    pub d: usize,
}

impl AttentionBounds {
    /// `√t B_x B_w + B_y`, the error-matrix bound.
    pub fn error_bound(&self) -> f64 {
        libm::sqrt(self.t as f64) * self.bx * self.bw + self.by
    }

    /// `C` in `‖∇R̂_A(T)‖ ≤ C ‖T‖`.
    pub fn grad_constant(&self) -> f64 {
        self.error_bound()
            * self.bw
            * self.bx
            * self.beta
            * softmax::JACOBIAN_BOUND
            * self.bx
            * self.bx
            / libm::sqrt(self.d as f64)
    }

    /// `C` in `|ΔR̂_A(T)| ≤ C ‖T‖²`.
    pub fn laplacian_constant(&self) -> f64 {
        let first = self.beta * softmax::JACOBIAN_BOUND * self.bx * self.bw;
        let second = self.error_bound()
            * self.bx
            * self.bw
            * self.beta
            * self.beta
            * softmax::hessian_bound(self.t);
        libm::pow(self.bx, 4.0) / self.d as f64 * (first * first + second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (AttnSample, AttnParams) {
        let x = Matrix::from_fn(3, 2, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.1);
        let y = Matrix::from_fn(3, 2, |i, j| 0.05 * (i + j) as f64);
        let wq = Matrix::from_fn(2, 2, |i, j| 0.4 + 0.1 * (i as f64) - 0.3 * (j as f64));
        let wk = Matrix::from_fn(2, 2, |i, j| -0.2 + 0.5 * (i as f64) * (j as f64));
        let wv = Matrix::from_fn(2, 2, |i, j| if i == j { 0.8 } else { 0.1 });
        (
            AttnSample::new(x, y).unwrap(),
            AttnParams::new(wq, wk, wv, 1.0).unwrap(),
        )
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let (sample, mut params) = toy();
        params.wq = Matrix::zeros(2, 2);
        let inter = attention_forward(&sample, &params).unwrap();
        assert!(inter.m.as_slice().iter().all(|&v| v == 0.0));
        let xv = sample.x.matmul(&params.wv).unwrap();
        let mean = xv.col_sums();
        for i in 0..3 {
            for (j, m) in mean.iter().enumerate() {
                assert!((inter.yhat[(i, j)] - m / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_ignores_scores() {
        let (_, params) = toy();
        let x = Matrix::from_vec(1, 2, vec![0.7, -0.4]).unwrap();
        let sample = AttnSample::new(x.clone(), Matrix::zeros(1, 2)).unwrap();
        let inter = attention_forward(&sample, &params).unwrap();
        assert_eq!(inter.s.as_slice(), &[1.0]);
        assert_eq!(inter.yhat, x.matmul(&params.wv).unwrap());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, params) = toy();
        let sample = AttnSample::new(Matrix::zeros(2, 3), Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            attention_forward(&sample, &params),
            Err(crate::Error::Shape(_))
        ));
        assert!(AttnSample::new(Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
        assert!(AttnParams::new(
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            1.0
        )
        .is_err());
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let (sample, params) = toy();
        let yhat = attention_forward(&sample, &params).unwrap().yhat;
        let fitted = AttnSample::new(sample.x.clone(), yhat).unwrap();
        assert_eq!(sample_loss(&fitted, &params).unwrap(), 0.0);
        let g = sample_loss_grad(&fitted, &params).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn zero_key_kills_query_gradient() {
        let (sample, mut params) = toy();
        params.wk = Matrix::zeros(2, 2);
        let g = sample_loss_grad(&sample, &params).unwrap();
        assert!(g.wq.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let (_, params) = toy();
        assert!(matches!(
            empirical_risk(&[], &params),
            Err(crate::Error::Usage(_))
        ));
        assert!(empirical_risk_grad(&[], &params).is_err());
    }

    #[test]
    fn duplicated_batch_matches_singleton() {
        let (sample, params) = toy();
        let single = empirical_risk(core::slice::from_ref(&sample), &params).unwrap();
        assert_eq!(single, sample_loss(&sample, &params).unwrap());
        let batch = vec![sample.clone(), sample.clone(), sample];
        let tripled = empirical_risk(&batch, &params).unwrap();
        assert!((tripled - single).abs() < 1e-15);
    }
}
