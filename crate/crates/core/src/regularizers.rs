//! Factor regularizers on a flattened point `T = (W₁, W₂)`.
//!
//! * `LogAmplified`: `R(T) = (λ/2) ‖T‖² log(1 + ‖T‖²)` on the whole vector.
//! * `Power`: `R_ε(T) = (λ/2) (‖W₁‖^{2+ε} + ‖W₂‖^{2+ε})`, one term per block.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, Result};
use crate::linalg::{dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    None,
    LogAmplified,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    /// Exponent excess for `Power`; ignored otherwise.
    pub epsilon: f64,
    /// Flattened sizes of the two factor blocks.
    pub factor_dims: (usize, usize),
}

impl RegularizerSpec {
    pub fn new(
        kind: RegularizerKind,
        lambda: f64,
        epsilon: f64,
        factor_dims: (usize, usize),
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(domain(format!("lambda must be nonnegative, got {lambda}")));
        }
        if kind == RegularizerKind::Power && !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(domain(format!(
                "power regularizer needs epsilon > 0, got {epsilon}"
            )));
        }
        Ok(Self {
            kind,
            lambda,
            epsilon,
            factor_dims,
        })
    }

    pub fn none(factor_dims: (usize, usize)) -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
            epsilon: 0.0,
            factor_dims,
        }
    }

    pub fn log_amplified(lambda: f64, factor_dims: (usize, usize)) -> Result<Self> {
        Self::new(RegularizerKind::LogAmplified, lambda, 0.0, factor_dims)
    }

    pub fn power(lambda: f64, epsilon: f64, factor_dims: (usize, usize)) -> Result<Self> {
        Self::new(RegularizerKind::Power, lambda, epsilon, factor_dims)
    }

    /// Total dimension `D = dim₁ + dim₂`.
    pub fn dim(&self) -> usize {
        self.factor_dims.0 + self.factor_dims.1
    }

    fn is_inactive(&self) -> bool {
        self.kind == RegularizerKind::None || self.lambda == 0.0
    }

    fn blocks<'a>(&self, t: &'a [f64]) -> [&'a [f64]; 2] {
        assert_eq!(
            t.len(),
            self.dim(),
            "factor point length does not match the regularizer's factor_dims"
        );
        let (first, second) = t.split_at(self.factor_dims.0);
        [first, second]
    }
}

pub fn reg_value(t: &[f64], spec: &RegularizerSpec) -> f64 {
    let blocks = spec.blocks(t);
    if spec.is_inactive() {
        return 0.0;
    }
    match spec.kind {
        RegularizerKind::None => 0.0,
        RegularizerKind::LogAmplified => {
            let sq = dot(t, t);
            0.5 * spec.lambda * sq * libm::log1p(sq)
        }
        RegularizerKind::Power => {
            let half_exp = 1.0 + 0.5 * spec.epsilon;
            blocks
                .iter()
                .map(|b| 0.5 * spec.lambda * libm::pow(dot(b, b), half_exp))
                .sum()
        }
    }
}

/// Adds `∇R(T)` into `out`.
pub fn reg_grad_add(t: &[f64], spec: &RegularizerSpec, out: &mut [f64]) {
    let blocks = spec.blocks(t);
    assert_eq!(out.len(), t.len());
    if spec.is_inactive() {
        return;
    }
    match spec.kind {
        RegularizerKind::None => {}
        RegularizerKind::LogAmplified => {
            // λ T [log(1 + ‖T‖²) + ‖T‖² / (1 + ‖T‖²)]
            let sq = dot(t, t);
            let radial = spec.lambda * (libm::log1p(sq) + sq / (1.0 + sq));
            for (o, &ti) in out.iter_mut().zip(t) {
                *o += radial * ti;
            }
        }
        RegularizerKind::Power => {
            // (λ/2)(2+ε) ‖b‖^ε b per block; ‖0‖^ε = 0 for ε > 0.
            let mut offset = 0;
            for b in blocks {
                let coeff =
                    0.5 * spec.lambda * (2.0 + spec.epsilon) * libm::pow(norm2(b), spec.epsilon);
                for (o, &bi) in out[offset..offset + b.len()].iter_mut().zip(b) {
                    *o += coeff * bi;
                }
                offset += b.len();
            }
        }
    }
}

pub fn reg_grad(t: &[f64], spec: &RegularizerSpec) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    reg_grad_add(t, spec, &mut out);
    out
}

pub fn reg_laplacian(t: &[f64], spec: &RegularizerSpec) -> f64 {
    let blocks = spec.blocks(t);
    if spec.is_inactive() {
        return 0.0;
    }
    match spec.kind {
        RegularizerKind::None => 0.0,
        RegularizerKind::LogAmplified => {
            let sq = dot(t, t);
            let lam = spec.lambda;
            let one_plus = 1.0 + sq;
            spec.dim() as f64 * lam * (libm::log1p(sq) + sq / one_plus)
                + 2.0 * lam * sq / one_plus
                + 2.0 * lam * sq / (one_plus * one_plus)
        }
        RegularizerKind::Power => {
            // (λ/2)(2+ε) Σ_b (ε + dim_b) ‖b‖^ε
            let eps = spec.epsilon;
            blocks
                .iter()
                .map(|b| {
                    0.5 * spec.lambda
                        * (2.0 + eps)
                        * (eps + b.len() as f64)
                        * libm::pow(norm2(b), eps)
                })
                .sum()
        }
    }
}

/// `(λ/2)(2+ε)(2ε+D) ‖T‖^ε`, the single-norm upper bound on the power
/// regularizer's Laplacian.
pub fn power_laplacian_bound(t: &[f64], spec: &RegularizerSpec) -> f64 {
    let eps = spec.epsilon;
    0.5 * spec.lambda * (2.0 + eps) * (2.0 * eps + spec.dim() as f64) * libm::pow(norm2(t), eps)
}

/// Constant `c` with `R(T) ≥ c ‖T‖²` whenever `‖T‖ ≥ radius`; zero when the
/// regularizer is inactive.
pub fn coercivity_constant(spec: &RegularizerSpec, radius: f64) -> f64 {
    if spec.is_inactive() {
        return 0.0;
    }
    match spec.kind {
        RegularizerKind::None => 0.0,
        RegularizerKind::LogAmplified => 0.5 * spec.lambda * libm::log1p(radius * radius),
        // ‖W₁‖^{2+ε} + ‖W₂‖^{2+ε} ≥ 2^{-ε/2} ‖T‖^{2+ε}
        RegularizerKind::Power => {
            0.5 * spec.lambda
                * libm::pow(2.0, -0.5 * spec.epsilon)
                * libm::pow(radius, spec.epsilon)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_point_is_zero_everywhere() {
        let specs = [
            RegularizerSpec::none((2, 3)),
            RegularizerSpec::log_amplified(0.7, (2, 3)).unwrap(),
            RegularizerSpec::power(0.7, 0.5, (2, 3)).unwrap(),
            RegularizerSpec::power(0.7, 1.5, (2, 3)).unwrap(),
        ];
        let zero = [0.0; 5];
        for spec in &specs {
            assert_eq!(reg_value(&zero, spec), 0.0);
            assert!(reg_grad(&zero, spec).iter().all(|&g| g == 0.0));
            assert_eq!(reg_laplacian(&zero, spec), 0.0);
        }
    }

    #[test]
    fn log_amplified_plug_in() {
        let spec = RegularizerSpec::log_amplified(2.0, (2, 2)).unwrap();
        let v = reg_value(&[1.0, 0.0, 0.0, 0.0], &spec);
        assert!((v - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn power_limit_is_weight_decay() {
        let spec = RegularizerSpec::power(0.9, 1e-8, (3, 2)).unwrap();
        let t = [0.3, -1.2, 0.5, 2.0, 0.1];
        let want = 0.45 * dot(&t, &t);
        assert!((reg_value(&t, &spec) - want).abs() < 1e-6);
    }

    #[test]
    fn power_gradient_on_unit_vector() {
        let spec = RegularizerSpec::power(2.0, 1.0, (3, 0)).unwrap();
        let g = reg_grad(&[1.0, 0.0, 0.0], &spec);
        assert_eq!(g, vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_lambda_is_inactive() {
        let spec = RegularizerSpec::power(0.0, 0.5, (1, 1)).unwrap();
        assert_eq!(reg_value(&[3.0, 4.0], &spec), 0.0);
        assert_eq!(reg_laplacian(&[3.0, 4.0], &spec), 0.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(RegularizerSpec::log_amplified(-1.0, (1, 1)).is_err());
        assert!(RegularizerSpec::power(1.0, 0.0, (1, 1)).is_err());
        assert!(RegularizerSpec::power(1.0, f64::NAN, (1, 1)).is_err());
    }
}
