//! Numerical checks of confinement and the Villani growth condition.
//!
//! A [`Potential`] is a scalar field on the flattened factor space with a
//! gradient and (exact or estimated) Laplacian. [`ray_scan`] evaluates
//! `F(R) = ‖∇V(Ru)‖²/s − ΔV(Ru)` along a ray, [`verify_lemma_bounds`] checks
//! the explicit gradient and Laplacian constants on random draws, and
//! [`gibbs_normalizability_check`] integrates `exp(−2V/s)` in low dimension.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{self, AttentionBounds, AttnParams, AttnSample};
use crate::error::{domain, shape, usage, Result};
use crate::linalg::{norm2, Matrix};
use crate::lora::{self, BoundedActivation, LoraBounds, LoraParams, LoraSample};
use crate::regularizers::{
    coercivity_constant, reg_grad_add, reg_laplacian, reg_value, RegularizerSpec,
};

/// Dimension above which the default Laplacian switches from the full
/// second-difference stencil to the Hutchinson estimator.
pub const FD_LAPLACIAN_MAX_DIM: usize = 200;
pub const DEFAULT_HUTCHINSON_PROBES: usize = 128;

/// A Laplacian value with its Monte-Carlo standard error (zero when exact or
/// deterministic).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianValue {
    pub value: f64,
    pub stderr: f64,
}

pub trait Potential: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: &[f64]) -> Result<f64>;
    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>>;

    /// Closed-form Laplacian, when the potential has one.
    fn exact_laplacian(&self, _t: &[f64]) -> Option<Result<f64>> {
        None
    }

    /// Exact Laplacian if available, otherwise a finite-difference or
    /// Hutchinson estimate depending on the dimension.
    fn laplacian(&self, t: &[f64]) -> Result<LaplacianValue> {
        if let Some(exact) = self.exact_laplacian(t) {
            return exact.map(|value| LaplacianValue { value, stderr: 0.0 });
        }
        let h = default_fd_step(t);
        if self.dim() <= FD_LAPLACIAN_MAX_DIM {
            let value = fd_laplacian(|p| self.value(p), t, h)?;
            Ok(LaplacianValue { value, stderr: 0.0 })
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            hutchinson_laplacian(
                |p| self.gradient(p),
                t,
                DEFAULT_HUTCHINSON_PROBES,
                h,
                &mut rng,
            )
        }
    }

    /// Named data and architecture constants entering the explicit bounds.
    fn bound_constants(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    /// A constant `c ≥ 0` with `V(T) ≥ c ‖T‖²` whenever `‖T‖ ≥ radius`.
    fn coercivity(&self, _radius: f64) -> f64 {
        0.0
    }
}

/// Step used when a caller does not choose one: relative to `‖T‖`, clamped
/// into the admissible range.
pub fn default_fd_step(t: &[f64]) -> f64 {
    (1e-4 * norm2(t).max(1.0)).clamp(1e-6, 1e-2)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-2).contains(&h) {
        return Err(domain(format!(
            "finite-difference step {h} outside [1e-6, 1e-2]"
        )));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain(format!("non-finite {what}")))
    }
}

/// `Σ_k (f(T + h e_k) − 2 f(T) + f(T − h e_k)) / h²` using `2D + 1` calls.
pub fn fd_laplacian<F>(f: F, t: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    check_step(h)?;
    if t.len() > 5000 {
        return Err(usage(format!(
            "fd_laplacian costs 2D+1 evaluations; D = {} exceeds 5000",
            t.len()
        )));
    }
    let f0 = finite(f(t)?, "function value")?;
    let mut p = t.to_vec();
    let mut total = 0.0;
    for k in 0..t.len() {
        p[k] = t[k] + h;
        let plus = finite(f(&p)?, "function value")?;
        p[k] = t[k] - h;
        let minus = finite(f(&p)?, "function value")?;
        p[k] = t[k];
        total += plus - 2.0 * f0 + minus;
    }
    Ok(total / (h * h))
}

/// Hutchinson trace estimate with Rademacher probes; each `vᵀ H v` uses a
/// central difference of the gradient along `v`.
pub fn hutchinson_laplacian<G, R>(
    grad: G,
    t: &[f64],
    n_probes: usize,
    h: f64,
    rng: &mut R,
) -> Result<LaplacianValue>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if n_probes < 16 {
        return Err(usage(format!(
            "hutchinson needs at least 16 probes, got {n_probes}"
        )));
    }
    check_step(h)?;
    let d = t.len();
    let mut v = vec![0.0; d];
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut samples = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        for vi in v.iter_mut() {
            *vi = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        for k in 0..d {
            plus[k] = t[k] + h * v[k];
            minus[k] = t[k] - h * v[k];
        }
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        let mut q = 0.0;
        for k in 0..d {
            q += (gp[k] - gm[k]) * v[k];
        }
        samples.push(finite(q / (2.0 * h), "Hessian-vector product")?);
    }
    let n = n_probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(LaplacianValue {
        value: mean,
        stderr: libm::sqrt(var / n),
    })
}

// ---------------------------------------------------------------------------
// Concrete potentials

/// `V(T) = ½ Σ_k c_k (T_k − m_k)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPotential {
    pub center: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl QuadraticPotential {
    pub fn isotropic(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            curvature: vec![1.0; dim],
        }
    }

    pub fn new(center: Vec<f64>, curvature: Vec<f64>) -> Result<Self> {
        if center.len() != curvature.len() {
            return Err(shape("center and curvature lengths differ"));
        }
        if curvature.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(domain("curvatures must be positive"));
        }
        Ok(Self { center, curvature })
    }
}

impl Potential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        check_len(t, self.dim())?;
        Ok(t.iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((ti, mi), ci)| 0.5 * ci * (ti - mi) * (ti - mi))
            .sum())
    }

    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_len(t, self.dim())?;
        Ok(t.iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((ti, mi), ci)| ci * (ti - mi))
            .collect())
    }

    fn exact_laplacian(&self, t: &[f64]) -> Option<Result<f64>> {
        Some(check_len(t, self.dim()).map(|_| self.curvature.iter().sum()))
    }

    fn coercivity(&self, radius: f64) -> f64 {
        let c_min = self.curvature.iter().copied().fold(f64::INFINITY, f64::min);
        let m = norm2(&self.center);
        if m == 0.0 {
            0.5 * c_min
        } else if radius >= 2.0 * m {
            // ‖T − m‖ ≥ ‖T‖/2 once ‖T‖ ≥ 2‖m‖
            0.125 * c_min
        } else {
            0.0
        }
    }
}

/// The regularizer alone, `V = R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerPotential {
    pub reg: RegularizerSpec,
}

impl Potential for RegularizerPotential {
    fn dim(&self) -> usize {
        self.reg.dim()
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        check_len(t, self.dim())?;
        Ok(reg_value(t, &self.reg))
    }

    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_len(t, self.dim())?;
        let mut g = vec![0.0; t.len()];
        reg_grad_add(t, &self.reg, &mut g);
        Ok(g)
    }

    fn exact_laplacian(&self, t: &[f64]) -> Option<Result<f64>> {
        Some(check_len(t, self.dim()).map(|_| reg_laplacian(t, &self.reg)))
    }

    fn coercivity(&self, radius: f64) -> f64 {
        coercivity_constant(&self.reg, radius)
    }
}

/// Empirical attention risk over `(W_Q, W_K)` plus a factor regularizer;
/// `W_V` and `β` are taken from `base` and held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPotential {
    pub batch: Vec<AttnSample>,
    pub base: AttnParams,
    pub reg: RegularizerSpec,
    /// Use the closed-form data-term Laplacian instead of an estimator.
    pub exact_data_laplacian: bool,
}

impl AttentionPotential {
    pub fn new(batch: Vec<AttnSample>, base: AttnParams, reg: RegularizerSpec) -> Result<Self> {
        if batch.is_empty() {
            return Err(usage("attention potential needs at least one sample"));
        }
        let (d, r) = base.dims();
        if reg.factor_dims != (d * r, d * r) {
            return Err(shape(format!(
                "regularizer factor_dims {:?} do not match W_Q, W_K of size {}",
                reg.factor_dims,
                d * r
            )));
        }
        for sample in &batch {
            if sample.width() != d {
                return Err(shape(format!(
                    "sample width {} but W_Q has {d} rows",
                    sample.width()
                )));
            }
        }
        Ok(Self {
            batch,
            base,
            reg,
            exact_data_laplacian: true,
        })
    }

    pub fn with_estimated_laplacian(mut self) -> Self {
        self.exact_data_laplacian = false;
        self
    }

    fn data_term(&self, t: &[f64]) -> Result<f64> {
        attention::empirical_risk(&self.batch, &self.base.with_factor_point(t)?)
    }

    pub fn bounds(&self) -> AttentionBounds {
        let (d, _) = self.base.dims();
        AttentionBounds {
            bx: self
                .batch
                .iter()
                .map(|s| s.x.frobenius())
                .fold(0.0, f64::max),
            by: self
                .batch
                .iter()
                .map(|s| s.y.frobenius())
                .fold(0.0, f64::max),
            bw: self.base.wv.frobenius(),
            beta: self.base.beta,
            t: self.batch[0].tokens(),
            d,
        }
    }
}

impl Potential for AttentionPotential {
    fn dim(&self) -> usize {
        self.reg.dim()
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        check_len(t, self.dim())?;
        Ok(self.data_term(t)? + reg_value(t, &self.reg))
    }

    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_len(t, self.dim())?;
        let mut g = attention::empirical_risk_grad(&self.batch, &self.base.with_factor_point(t)?)?
            .flatten();
        reg_grad_add(t, &self.reg, &mut g);
        Ok(g)
    }

    fn exact_laplacian(&self, t: &[f64]) -> Option<Result<f64>> {
        if !self.exact_data_laplacian {
            return None;
        }
        Some((|| {
            check_len(t, self.dim())?;
            let params = self.base.with_factor_point(t)?;
            Ok(attention::empirical_risk_laplacian(&self.batch, &params)?
                + reg_laplacian(t, &self.reg))
        })())
    }

    fn laplacian(&self, t: &[f64]) -> Result<LaplacianValue> {
        if let Some(exact) = self.exact_laplacian(t) {
            return exact.map(|value| LaplacianValue { value, stderr: 0.0 });
        }
        // Estimate the data term only; the regularizer part is exact.
        check_len(t, self.dim())?;
        let h = default_fd_step(t);
        let data = if self.dim() <= FD_LAPLACIAN_MAX_DIM {
            LaplacianValue {
                value: fd_laplacian(|p| self.data_term(p), t, h)?,
                stderr: 0.0,
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let grad = |p: &[f64]| {
                Ok(
                    attention::empirical_risk_grad(&self.batch, &self.base.with_factor_point(p)?)?
                        .flatten(),
                )
            };
            hutchinson_laplacian(grad, t, DEFAULT_HUTCHINSON_PROBES, h, &mut rng)?
        };
        Ok(LaplacianValue {
            value: data.value + reg_laplacian(t, &self.reg),
            stderr: data.stderr,
        })
    }

    fn bound_constants(&self) -> Vec<(&'static str, f64)> {
        let b = self.bounds();
        vec![
            ("B_x", b.bx),
            ("B_y", b.by),
            ("B_w", b.bw),
            ("B_s1", crate::attention::softmax::JACOBIAN_BOUND),
            ("B_s2", crate::attention::softmax::hessian_bound(b.t)),
            ("C_grad", b.grad_constant()),
            ("C_lap", b.laplacian_constant()),
        ]
    }

    fn coercivity(&self, radius: f64) -> f64 {
        coercivity_constant(&self.reg, radius)
    }
}

/// Rank-restricted two-layer net risk over `(U, V)` plus a factor
/// regularizer; the outer weights `a` come from `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPotential {
    pub batch: Vec<LoraSample>,
    pub base: LoraParams,
    pub act: BoundedActivation,
    pub reg: RegularizerSpec,
}

impl LoraPotential {
    pub fn new(
        batch: Vec<LoraSample>,
        base: LoraParams,
        act: BoundedActivation,
        reg: RegularizerSpec,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(usage("LoRA potential needs at least one sample"));
        }
        if reg.factor_dims != base.factor_dims() {
            return Err(shape(format!(
                "regularizer factor_dims {:?} do not match (U, V) sizes {:?}",
                reg.factor_dims,
                base.factor_dims()
            )));
        }
        let (_, d, _) = base.dims();
        if batch.iter().any(|s| s.x.len() != d) {
            return Err(shape(format!("every input must have length {d}")));
        }
        Ok(Self {
            batch,
            base,
            act,
            reg,
        })
    }

    pub fn bounds(&self) -> LoraBounds {
        LoraBounds::new(
            self.batch.iter().map(|s| norm2(&s.x)).fold(0.0, f64::max),
            self.batch
                .iter()
                .map(|s| libm::fabs(s.y))
                .fold(0.0, f64::max),
            &self.base.a,
            self.act,
        )
    }

    /// True when the regularizer cannot confine the scaling orbit.
    pub fn has_non_confining_orbit(&self) -> bool {
        coercivity_constant(&self.reg, 1.0) == 0.0
    }
}

impl Potential for LoraPotential {
    fn dim(&self) -> usize {
        self.reg.dim()
    }

    fn value(&self, t: &[f64]) -> Result<f64> {
        check_len(t, self.dim())?;
        let params = self.base.with_factor_point(t)?;
        Ok(lora::lora_loss(&self.batch, &params, &self.act)? + reg_value(t, &self.reg))
    }

    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_len(t, self.dim())?;
        let params = self.base.with_factor_point(t)?;
        let mut g = lora::lora_loss_grad(&self.batch, &params, &self.act)?;
        reg_grad_add(t, &self.reg, &mut g);
        Ok(g)
    }

    fn exact_laplacian(&self, t: &[f64]) -> Option<Result<f64>> {
        Some((|| {
            check_len(t, self.dim())?;
            let params = self.base.with_factor_point(t)?;
            Ok(
                lora::lora_laplacian(&self.batch, &params, &self.act)?
                    + reg_laplacian(t, &self.reg),
            )
        })())
    }

    fn bound_constants(&self) -> Vec<(&'static str, f64)> {
        let b = self.bounds();
        vec![
            ("B_x", b.bx),
            ("B_y", b.by),
            ("B_sigma", b.act.b_sigma),
            ("B_sigma1", b.act.b_sigma1),
            ("B_sigma2", b.act.b_sigma2),
            ("B_0", b.residual_bound()),
            ("C_grad", b.grad_constant()),
            ("C_lap", b.laplacian_constant()),
        ]
    }

    fn coercivity(&self, radius: f64) -> f64 {
        coercivity_constant(&self.reg, radius)
    }
}

fn check_len(t: &[f64], dim: usize) -> Result<()> {
    if t.len() != dim {
        return Err(shape(format!(
            "point of length {} for a {dim}-dim potential",
            t.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ray scans

/// The standard radius grid `{1, 10, 10², 10³, 10⁴}`.
pub const DEFAULT_RADII: [f64; 5] = [1.0, 1e1, 1e2, 1e3, 1e4];

#[derive(Debug, Clone, PartialEq)]
pub struct RayScanReport {
    pub direction: Vec<f64>,
    pub radii: Vec<f64>,
    /// `F(R) = ‖∇V(Ru)‖²/s − ΔV(Ru)`; NaN where `overflow` is set.
    pub villani_values: Vec<f64>,
    /// `V(Ru)`; NaN where `overflow` is set.
    pub confining_values: Vec<f64>,
    pub laplacian_stderr: Vec<f64>,
    pub overflow: Vec<bool>,
    pub s: f64,
}

impl RayScanReport {
    pub fn any_overflow(&self) -> bool {
        self.overflow.iter().any(|&o| o)
    }

    pub fn villani_strictly_increasing(&self) -> bool {
        strictly_increasing(&self.villani_values)
    }

    pub fn confining_strictly_increasing(&self) -> bool {
        strictly_increasing(&self.confining_values)
    }

    /// Whether `F` is positive at each of the last `k` radii.
    pub fn villani_positive_tail(&self, k: usize) -> bool {
        let n = self.villani_values.len();
        k <= n && self.villani_values[n - k..].iter().all(|&f| f > 0.0)
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

/// Scans `F(R)` and `V(Ru)` along the unit direction `u`.
///
/// Radii where an evaluation overflows are flagged and the scan moves on.
pub fn ray_scan<P: Potential + ?Sized>(
    potential: &P,
    direction: &[f64],
    radii: &[f64],
    s: f64,
) -> Result<RayScanReport> {
    check_len(direction, potential.dim())?;
    if libm::fabs(norm2(direction) - 1.0) > 1e-9 {
        return Err(domain("ray direction must have unit norm"));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(domain(format!("temperature must be positive, got {s}")));
    }
    if radii.is_empty()
        || radii[0] <= 0.0
        || !radii.windows(2).all(|w| w[1] > w[0])
        || radii.iter().any(|r| !r.is_finite())
    {
        return Err(domain(
            "radii must be positive, finite and strictly increasing",
        ));
    }
    let n = radii.len();
    let mut report = RayScanReport {
        direction: direction.to_vec(),
        radii: radii.to_vec(),
        villani_values: Vec::with_capacity(n),
        confining_values: Vec::with_capacity(n),
        laplacian_stderr: Vec::with_capacity(n),
        overflow: Vec::with_capacity(n),
        s,
    };
    let mut point = vec![0.0; direction.len()];
    for &r in radii {
        for (p, &u) in point.iter_mut().zip(direction) {
            *p = r * u;
        }
        match scan_point(potential, &point, s) {
            Ok((f, v, stderr)) => {
                report.villani_values.push(f);
                report.confining_values.push(v);
                report.laplacian_stderr.push(stderr);
                report.overflow.push(false);
            }
            Err(crate::Error::Domain(_)) => {
                report.villani_values.push(f64::NAN);
                report.confining_values.push(f64::NAN);
                report.laplacian_stderr.push(f64::NAN);
                report.overflow.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

fn scan_point<P: Potential + ?Sized>(
    potential: &P,
    point: &[f64],
    s: f64,
) -> Result<(f64, f64, f64)> {
    let v = finite(potential.value(point)?, "potential value")?;
    let g = potential.gradient(point)?;
    // ‖∇V‖²/s assembled in log space so a huge but finite gradient norm is
    // not lost to an intermediate overflow of the squared sum.
    let g_max = g.iter().fold(0.0_f64, |m, x| m.max(libm::fabs(*x)));
    finite(g_max, "gradient")?;
    let grad_term = if g_max == 0.0 {
        0.0
    } else {
        let scaled: f64 = g.iter().map(|x| (x / g_max) * (x / g_max)).sum();
        libm::exp(2.0 * libm::log(g_max) + libm::log(scaled) - libm::log(s))
    };
    let lap = potential.laplacian(point)?;
    let f = finite(
        grad_term - finite(lap.value, "laplacian")?,
        "Villani functional",
    )?;
    Ok((f, v, lap.stderr))
}

/// Draws a unit direction from the rotation-invariant distribution.
pub fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Independent RNG stream for item `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// ---------------------------------------------------------------------------
// Lemma bound verification

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LemmaModel {
    /// Attention head with `t` tokens, width `d`, factor rank `r`, `n` samples.
    Attention {
        t: usize,
        d: usize,
        r: usize,
        n: usize,
    },
    /// Two-layer net with `p` hidden units, input `d`, rank `r`, `n` samples.
    Lora {
        p: usize,
        d: usize,
        r: usize,
        n: usize,
        act: BoundedActivation,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub draw: u64,
    pub seed: u64,
    pub quantity: &'static str,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub trials: usize,
    /// Largest `‖∇R̂‖ / (C_grad ‖T‖)` seen.
    pub max_grad_ratio: f64,
    /// Largest `|ΔR̂| / (C_lap ‖T‖²)` seen.
    pub max_laplacian_ratio: f64,
    pub violations: Vec<BoundViolation>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative slack allowed for floating-point rounding when comparing a
/// measured quantity with its bound.
const BOUND_ROUNDING_SLACK: f64 = 1e-12;

/// Checks `‖∇R̂‖ ≤ C_grad ‖T‖` and `|ΔR̂| ≤ C_lap ‖T‖²` on random draws of
/// data, fixed weights and factor point. Draw `i` uses stream `i` of `seed`.
pub fn verify_lemma_bounds(model: LemmaModel, trials: usize, seed: u64) -> Result<LemmaReport> {
    if trials == 0 {
        return Err(usage("verify_lemma_bounds needs at least one trial"));
    }
    let mut report = LemmaReport {
        trials,
        max_grad_ratio: 0.0,
        max_laplacian_ratio: 0.0,
        violations: Vec::new(),
    };
    for draw in 0..trials as u64 {
        let mut rng = stream_rng(seed, draw);
        let (grad, lap, c_grad, c_lap, t_norm) = match model {
            LemmaModel::Attention { t, d, r, n } => lemma_draw_attention(t, d, r, n, &mut rng)?,
            LemmaModel::Lora { p, d, r, n, act } => lemma_draw_lora(p, d, r, n, act, &mut rng)?,
        };
        let mut record = |quantity: &'static str, measured: f64, bound: f64| -> f64 {
            if measured > bound * (1.0 + BOUND_ROUNDING_SLACK) || !measured.is_finite() {
                report.violations.push(BoundViolation {
                    draw,
                    seed,
                    quantity,
                    measured,
                    bound,
                });
            }
            if bound > 0.0 {
                measured / bound
            } else {
                0.0
            }
        };
        let gr = record("gradient", grad, c_grad * t_norm);
        let lr = record("laplacian", libm::fabs(lap), c_lap * t_norm * t_norm);
        report.max_grad_ratio = report.max_grad_ratio.max(gr);
        report.max_laplacian_ratio = report.max_laplacian_ratio.max(lr);
    }
    Ok(report)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

/// A random factor point whose norm is log-uniform on `[1e-2, 10]`.
fn random_factor_point<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let u = random_direction(dim, rng);
    let radius = libm::pow(10.0, rng.random_range(-2.0..=1.0));
    u.into_iter().map(|x| radius * x).collect()
}

fn lemma_draw_attention<R: Rng + ?Sized>(
    t: usize,
    d: usize,
    r: usize,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64, f64, f64, f64)> {
    let x_scale = libm::pow(10.0, rng.random_range(-1.0..=0.5));
    let y_scale = libm::pow(10.0, rng.random_range(-1.0..=0.5));
    let batch = (0..n.max(1))
        .map(|_| {
            AttnSample::new(
                gaussian_matrix(t, d, x_scale, rng),
                gaussian_matrix(t, d, y_scale, rng),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let wv = gaussian_matrix(d, d, 1.0 / libm::sqrt(d as f64), rng);
    let beta = rng.random_range(0.5..=2.0);
    let base = AttnParams::new(Matrix::zeros(d, r), Matrix::zeros(d, r), wv, beta)?;
    let potential = AttentionPotential::new(batch, base, RegularizerSpec::none((d * r, d * r)))?;
    let point = random_factor_point(2 * d * r, rng);
    let params = potential.base.with_factor_point(&point)?;
    let grad = attention::empirical_risk_grad(&potential.batch, &params)?.norm();
    let lap = attention::empirical_risk_laplacian(&potential.batch, &params)?;
    let b = potential.bounds();
    Ok((
        grad,
        lap,
        b.grad_constant(),
        b.laplacian_constant(),
        norm2(&point),
    ))
}

fn lemma_draw_lora<R: Rng + ?Sized>(
    p: usize,
    d: usize,
    r: usize,
    n: usize,
    act: BoundedActivation,
    rng: &mut R,
) -> Result<(f64, f64, f64, f64, f64)> {
    let x_scale = libm::pow(10.0, rng.random_range(-1.0..=0.5));
    let y_scale = libm::pow(10.0, rng.random_range(-1.0..=0.5));
    let batch: Vec<LoraSample> = (0..n.max(1))
        .map(|_| LoraSample {
            x: (0..d)
                .map(|_| x_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            y: y_scale * rng.sample::<f64, _>(StandardNormal),
        })
        .collect();
    let a = LoraParams::default_outer_weights(p, rng);
    let base = LoraParams::new(Matrix::zeros(p, r), Matrix::zeros(d, r), a)?;
    let potential = LoraPotential::new(batch, base, act, RegularizerSpec::none((p * r, d * r)))?;
    let point = random_factor_point(potential.dim(), rng);
    let params = potential.base.with_factor_point(&point)?;
    let grad = norm2(&lora::lora_loss_grad(&potential.batch, &params, &act)?);
    let lap = lora::lora_laplacian(&potential.batch, &params, &act)?;
    let b = potential.bounds();
    Ok((
        grad,
        lap,
        b.grad_constant(),
        b.laplacian_constant(),
        norm2(&point),
    ))
}

// ---------------------------------------------------------------------------
// Gibbs partition function

/// Panel layout for the truncated-domain quadrature along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureGrid {
    /// Half-width of the uniformly paneled core around the origin.
    pub core_half_width: f64,
    /// Panel width inside the core.
    pub core_panel: f64,
    /// Geometric growth factor of panel widths outside the core.
    pub growth: f64,
    /// Gauss-Legendre nodes per panel.
    pub nodes_per_panel: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self {
            core_half_width: 4.0,
            core_panel: 0.125,
            growth: 1.25,
            nodes_per_panel: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsReport {
    /// `∫_{[−L, L]^D} exp(−2V/s)`.
    pub integral: f64,
    /// Upper bound on the mass outside the box; infinite when the potential
    /// has no coercive lower bound there.
    pub tail_bound: f64,
    pub normalizable: bool,
    pub half_width: f64,
    pub nodes_per_axis: usize,
}

/// Integrates the Gibbs factor `exp(−2V/s)` on `[−L, L]^D` for `D ≤ 3`.
///
/// The outside mass is bounded through the potential's coercivity constant
/// `c` (`V ≥ c ‖T‖²` beyond `L`): `∫_{‖T‖≥L} e^{−a‖T‖²} ≤ e^{−aL²/2} (2π/a)^{D/2}`
/// with `a = 2c/s`. A zero constant means the partition function is not
/// certified finite and the report says so.
pub fn gibbs_normalizability_check<P: Potential + ?Sized>(
    potential: &P,
    s: f64,
    half_width: f64,
    grid: &QuadratureGrid,
) -> Result<GibbsReport> {
    let dim = potential.dim();
    if dim == 0 || dim > 3 {
        return Err(usage(format!(
            "tensor-product Gibbs quadrature supports 1 <= D <= 3, got {dim}"
        )));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(domain(format!("temperature must be positive, got {s}")));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(domain("half-width must be positive"));
    }
    let (nodes, weights) = axis_rule(half_width, grid)?;
    let m = nodes.len();
    let mut point = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    let mut total = 0.0;
    'outer: loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            point[k] = nodes[i];
            w *= weights[i];
        }
        let v = potential.value(&point)?;
        total += w * libm::exp(-2.0 * v / s);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < m {
                continue 'outer;
            }
            *slot = 0;
        }
        break;
    }
    let c = potential.coercivity(half_width);
    let tail_bound = if c > 0.0 {
        let a = 2.0 * c / s;
        libm::exp(-0.5 * a * half_width * half_width)
            * libm::pow(2.0 * core::f64::consts::PI / a, 0.5 * dim as f64)
    } else {
        f64::INFINITY
    };
    Ok(GibbsReport {
        integral: total,
        tail_bound,
        normalizable: tail_bound.is_finite() && total.is_finite(),
        half_width,
        nodes_per_axis: m,
    })
}

/// Composite Gauss-Legendre nodes and weights on `[−L, L]`.
fn axis_rule(half_width: f64, grid: &QuadratureGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(grid.core_panel > 0.0 && grid.growth >= 1.0 && grid.nodes_per_panel >= 1) {
        return Err(domain("invalid quadrature grid"));
    }
    // Panel edges on [0, L], then mirrored.
    let mut edges = vec![0.0];
    let mut x = 0.0;
    let mut width = grid.core_panel;
    while x < half_width {
        let next = (x + width).min(half_width);
        edges.push(next);
        x = next;
        if x >= grid.core_half_width {
            width *= grid.growth;
        }
    }
    let (gx, gw) = gauss_legendre(grid.nodes_per_panel);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for pair in edges.windows(2).rev() {
        push_panel(-pair[1], -pair[0], &gx, &gw, &mut nodes, &mut weights);
    }
    for pair in edges.windows(2) {
        push_panel(pair[0], pair[1], &gx, &gw, &mut nodes, &mut weights);
    }
    Ok((nodes, weights))
}

fn push_panel(
    a: f64,
    b: f64,
    gx: &[f64],
    gw: &[f64],
    nodes: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    for (&x, &w) in gx.iter().zip(gw) {
        nodes.push(mid + half * x);
        weights.push(half * w);
    }
}

/// Gauss-Legendre rule on `[−1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if libm::fabs(dx) < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Human-readable name of a bound constant list, for reports.
pub fn format_constants(constants: &[(&'static str, f64)]) -> String {
    let mut out = String::new();
    for (i, (name, value)) in constants.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&format!("{name}={value:e}"));
    }
    out
}
