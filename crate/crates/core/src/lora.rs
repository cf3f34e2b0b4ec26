//! Depth-2 network `z = aᵀ σ(U Vᵀ x)` trained in the low-rank factor space.
//!
//! Intermediates reused by the derivatives: `h = Vᵀx`, `s = U h`,
//! `g = a ⊙ σ′(s)`.  The flattened factor point is `U` (row-major, `p×r`)
//! followed by `V` (row-major, `d×r`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, shape, usage, Result};
use crate::linalg::{axpy, dot, norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Tanh,
    Sigmoid,
}

/// A smooth activation with published suprema of `|σ|`, `|σ′|`, `|σ″|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedActivation {
    pub kind: ActivationKind,
    pub b_sigma: f64,
    pub b_sigma1: f64,
    pub b_sigma2: f64,
}

impl BoundedActivation {
    pub fn tanh() -> Self {
        Self {
            kind: ActivationKind::Tanh,
            b_sigma: 1.0,
            b_sigma1: 1.0,
            b_sigma2: 4.0 / (3.0 * libm::sqrt(3.0)),
        }
    }

    pub fn sigmoid() -> Self {
        Self {
            kind: ActivationKind::Sigmoid,
            b_sigma: 1.0,
            b_sigma1: 0.25,
            b_sigma2: 1.0 / (6.0 * libm::sqrt(3.0)),
        }
    }

    pub fn new(kind: ActivationKind) -> Self {
        match kind {
            ActivationKind::Tanh => Self::tanh(),
            ActivationKind::Sigmoid => Self::sigmoid(),
        }
    }

    /// `(σ(x), σ′(x), σ″(x))`
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        match self.kind {
            ActivationKind::Tanh => {
                let th = libm::tanh(x);
                let d1 = 1.0 - th * th;
                (th, d1, -2.0 * th * d1)
            }
            ActivationKind::Sigmoid => {
                let sg = if x >= 0.0 {
                    1.0 / (1.0 + libm::exp(-x))
                } else {
                    let e = libm::exp(x);
                    e / (1.0 + e)
                };
                let d1 = sg * (1.0 - sg);
                (sg, d1, d1 * (1.0 - 2.0 * sg))
            }
        }
    }
}

impl Default for BoundedActivation {
    fn default() -> Self {
        Self::tanh()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl LoraSample {
    pub fn within_bounds(&self, bx: f64, by: f64) -> bool {
        norm2(&self.x) <= bx && libm::fabs(self.y) <= by
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub u: Matrix,
    pub v: Matrix,
    /// Fixed outer weights.
    pub a: Vec<f64>,
}

impl LoraParams {
    pub fn new(u: Matrix, v: Matrix, a: Vec<f64>) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(shape(format!(
                "U is {:?} but V is {:?}; ranks differ",
                u.shape(),
                v.shape()
            )));
        }
        if a.len() != u.rows() {
            return Err(shape(format!(
                "outer weights have length {} but U has {} rows",
                a.len(),
                u.rows()
            )));
        }
        if !(u.is_finite() && v.is_finite() && a.iter().all(|v| v.is_finite())) {
            return Err(domain("LoRA parameters must be finite"));
        }
        Ok(Self { u, v, a })
    }

    /// Outer weights drawn from a standard normal scaled by `1/√p`.
    pub fn default_outer_weights<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<f64> {
        let scale = 1.0 / libm::sqrt(p as f64);
        (0..p)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `(p, d, r)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u.rows(), self.v.rows(), self.u.cols())
    }

    /// Flattened sizes of the `U` and `V` blocks.
    pub fn factor_dims(&self) -> (usize, usize) {
        (self.u.len(), self.v.len())
    }

    pub fn factor_point(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.u.len() + self.v.len());
        t.extend_from_slice(self.u.as_slice());
        t.extend_from_slice(self.v.as_slice());
        t
    }

    pub fn with_factor_point(&self, t: &[f64]) -> Result<Self> {
        let (p, d, r) = self.dims();
        if t.len() != (p + d) * r {
            return Err(shape(format!(
                "factor point of length {} for (p + d) r = {}",
                t.len(),
                (p + d) * r
            )));
        }
        Ok(Self {
            u: Matrix::from_vec(p, r, t[..p * r].to_vec())?,
            v: Matrix::from_vec(d, r, t[p * r..].to_vec())?,
            a: self.a.clone(),
        })
    }

    /// The adapted weight `U Vᵀ`.
    pub fn product(&self) -> Matrix {
        self.u
            .matmul_t(&self.v)
            .expect("rank checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraForward {
    pub z: f64,
    /// `Vᵀ x`
    pub h: Vec<f64>,
    /// `U h`
    pub s: Vec<f64>,
}

/// Gradient blocks with respect to `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub u: Matrix,
    pub v: Matrix,
}

impl FactorGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.u.len() + self.v.len());
        g.extend_from_slice(self.u.as_slice());
        g.extend_from_slice(self.v.as_slice());
        g
    }

    pub fn norm_sq(&self) -> f64 {
        self.u.frobenius_sq() + self.v.frobenius_sq()
    }
}

fn check_sample(sample: &LoraSample, params: &LoraParams) -> Result<()> {
    if sample.x.len() != params.v.rows() {
        return Err(shape(format!(
            "input of length {} but V has {} rows",
            sample.x.len(),
            params.v.rows()
        )));
    }
    Ok(())
}

pub fn lora_forward(
    sample: &LoraSample,
    params: &LoraParams,
    act: &BoundedActivation,
) -> Result<LoraForward> {
    check_sample(sample, params)?;
    let h = params.v.t_matvec(&sample.x)?;
    let s = params.u.matvec(&h)?;
    let z = params
        .a
        .iter()
        .zip(&s)
        .map(|(aj, &sj)| aj * act.eval(sj).0)
        .sum();
    Ok(LoraForward { z, h, s })
}

/// `∇_U z = g hᵀ`, `∇_V z = x (Uᵀ g)ᵀ`.
pub fn lora_grad_z(
    sample: &LoraSample,
    params: &LoraParams,
    act: &BoundedActivation,
) -> Result<FactorGrad> {
    let fwd = lora_forward(sample, params, act)?;
    Ok(grad_z_from_forward(sample, params, act, &fwd))
}

fn grad_z_from_forward(
    sample: &LoraSample,
    params: &LoraParams,
    act: &BoundedActivation,
    fwd: &LoraForward,
) -> FactorGrad {
    let (p, d, r) = params.dims();
    let g: Vec<f64> = params
        .a
        .iter()
        .zip(&fwd.s)
        .map(|(aj, &sj)| aj * act.eval(sj).1)
        .collect();
    let u_grad = Matrix::from_fn(p, r, |j, k| g[j] * fwd.h[k]);
    let ug = params.u.t_matvec(&g).expect("shapes checked");
    let v_grad = Matrix::from_fn(d, r, |l, k| sample.x[l] * ug[k]);
    FactorGrad {
        u: u_grad,
        v: v_grad,
    }
}

fn check_batch(batch: &[LoraSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(usage("LoRA loss over an empty batch"));
    }
    Ok(())
}

/// `L(T) = (1/n) Σ ½ (y_i − z_i)²`
pub fn lora_loss(
    batch: &[LoraSample],
    params: &LoraParams,
    act: &BoundedActivation,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for sample in batch {
        let z = lora_forward(sample, params, act)?.z;
        total += 0.5 * (sample.y - z) * (sample.y - z);
    }
    Ok(total / batch.len() as f64)
}

/// Flattened `∇_T L = (1/n) Σ (z_i − y_i) ∇_T z_i`.
pub fn lora_loss_grad(
    batch: &[LoraSample],
    params: &LoraParams,
    act: &BoundedActivation,
) -> Result<Vec<f64>> {
    check_batch(batch)?;
    let (p, d, r) = params.dims();
    let mut grad = vec![0.0; (p + d) * r];
    for sample in batch {
        let fwd = lora_forward(sample, params, act)?;
        let gz = grad_z_from_forward(sample, params, act, &fwd);
        let resid = fwd.z - sample.y;
        axpy(resid, gz.u.as_slice(), &mut grad[..p * r]);
        axpy(resid, gz.v.as_slice(), &mut grad[p * r..]);
    }
    let inv_n = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok(grad)
}

/// `Δ_T z = ‖h‖² Σ_j a_j σ″(s_j) + ‖x‖² Σ_j a_j σ″(s_j) ‖U_j‖²`.
pub fn lora_laplacian_z(
    sample: &LoraSample,
    params: &LoraParams,
    act: &BoundedActivation,
) -> Result<f64> {
    let fwd = lora_forward(sample, params, act)?;
    Ok(laplacian_z_from_forward(sample, params, act, &fwd))
}

fn laplacian_z_from_forward(
    sample: &LoraSample,
    params: &LoraParams,
    act: &BoundedActivation,
    fwd: &LoraForward,
) -> f64 {
    let h_sq = dot(&fwd.h, &fwd.h);
    let x_sq = dot(&sample.x, &sample.x);
    let mut u_part = 0.0;
    let mut v_part = 0.0;
    for (j, (&aj, &sj)) in params.a.iter().zip(&fwd.s).enumerate() {
        let w = aj * act.eval(sj).2;
        let row = params.u.row(j);
        u_part += w;
        v_part += w * dot(row, row);
    }
    h_sq * u_part + x_sq * v_part
}

/// Exact `ΔL = (1/n) Σ (‖∇_T z_i‖² + (z_i − y_i) Δ_T z_i)`.
pub fn lora_laplacian(
    batch: &[LoraSample],
    params: &LoraParams,
    act: &BoundedActivation,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for sample in batch {
        let fwd = lora_forward(sample, params, act)?;
        let gz = grad_z_from_forward(sample, params, act, &fwd);
        let lap_z = laplacian_z_from_forward(sample, params, act, &fwd);
        total += gz.norm_sq() + (fwd.z - sample.y) * lap_z;
    }
    Ok(total / batch.len() as f64)
}

/// Condition number above which an orbit generator counts as singular.
pub const ORBIT_CONDITION_LIMIT: f64 = 1e12;

/// `(U A, V A⁻ᵀ)`, which leaves `U Vᵀ` and hence the data loss unchanged.
pub fn scaling_orbit(params: &LoraParams, a: &Matrix) -> Result<LoraParams> {
    let r = params.u.cols();
    if a.shape() != (r, r) {
        return Err(shape(format!(
            "orbit generator must be {r}x{r}, got {:?}",
            a.shape()
        )));
    }
    let cond = a.condition_number_1();
    if !(cond <= ORBIT_CONDITION_LIMIT) {
        return Err(domain(format!(
            "orbit generator is singular (condition number {cond:e})"
        )));
    }
    let inv = a.inverse()?;
    Ok(LoraParams {
        u: params.u.matmul(a)?,
        v: params.v.matmul_t(&inv)?,
        a: params.a.clone(),
    })
}

/// Data bounds and the explicit LoRA gradient / Laplacian constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraBounds {
    pub bx: f64,
    pub by: f64,
    pub a_norm2: f64,
    pub a_norm1: f64,
    pub p: usize,
    pub act: BoundedActivation,
}

impl LoraBounds {
    pub fn new(bx: f64, by: f64, a: &[f64], act: BoundedActivation) -> Self {
        Self {
            bx,
            by,
            a_norm2: norm2(a),
            a_norm1: a.iter().map(|v| libm::fabs(*v)).sum(),
            p: a.len(),
            act,
        }
    }

    /// `B₀ = ‖a‖₂ √p B_σ + B_y`, a bound on `|z − y|`.
    pub fn residual_bound(&self) -> f64 {
        self.a_norm2 * libm::sqrt(self.p as f64) * self.act.b_sigma + self.by
    }

    /// `C` in `‖∇_T z‖ ≤ C ‖T‖`.
    pub fn grad_z_constant(&self) -> f64 {
        self.act.b_sigma1 * self.bx * self.a_norm2
    }

    /// `C` in `‖∇_T L‖ ≤ C ‖T‖`.
    pub fn grad_constant(&self) -> f64 {
        self.residual_bound() * self.grad_z_constant()
    }

    /// `C` in `|ΔL| ≤ C ‖T‖²`.
    pub fn laplacian_constant(&self) -> f64 {
        let g = self.grad_z_constant();
        g * g + self.residual_bound() * self.act.b_sigma2 * self.a_norm1 * self.bx * self.bx
    }
}
