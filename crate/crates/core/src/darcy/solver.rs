//! Synthetic permeability fields and the finite-difference pressure solve
//! for `−∇·(a ∇u) = 1` on the unit square with zero Dirichlet data.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, usage, Error, Result};

/// The two permeability values of the thresholded field.
pub const PERMEABILITY_LOW: f64 = 3.0;
pub const PERMEABILITY_HIGH: f64 = 12.0;

/// Relative residual at which the conjugate gradient iteration stops.
pub const SOLVER_TOL: f64 = 1e-10;

/// Permeability and pressure on the `n×n` interior nodes of a uniform grid
/// with spacing `1/(n+1)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DarcyField {
    pub n: usize,
    pub a: Vec<f64>,
    pub u: Vec<f64>,
}

impl DarcyField {
    pub fn spacing(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }
}

/// Smoothed white noise thresholded at zero to `{3, 12}`.
///
/// The noise is convolved (periodically) with a separable Gaussian of
/// width `0.08 n` pixels.
pub fn random_permeability<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = (0.08 * n as f64).max(1.0);
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| libm::exp(-0.5 * (k * k) as f64 / (sigma * sigma)))
        .collect();
    let wrap = |i: isize| i.rem_euclid(n as isize) as usize;
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (kk, w) in kernel.iter().enumerate() {
                acc += w * noise[i * n + wrap(j as isize + kk as isize - radius)];
            }
            rows[i * n + j] = acc;
        }
    }
    let mut field = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (kk, w) in kernel.iter().enumerate() {
                acc += w * rows[wrap(i as isize + kk as isize - radius) * n + j];
            }
            field[i * n + j] = if acc >= 0.0 {
                PERMEABILITY_HIGH
            } else {
                PERMEABILITY_LOW
            };
        }
    }
    field
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Applies the (h²-scaled) 5-point operator: `Σ_faces a_f (u_c − u_nb)`.
fn apply_operator(n: usize, a: &[f64], u: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            let ac = a[c];
            let mut acc = 0.0;
            let mut nb = |ii: isize, jj: isize| {
                if ii < 0 || jj < 0 || ii >= n as isize || jj >= n as isize {
                    // boundary neighbour: u = 0, face coefficient from the node
                    acc += ac * u[c];
                } else {
                    let k = ii as usize * n + jj as usize;
                    acc += harmonic(ac, a[k]) * (u[c] - u[k]);
                }
            };
            nb(i as isize - 1, j as isize);
            nb(i as isize + 1, j as isize);
            nb(i as isize, j as isize - 1);
            nb(i as isize, j as isize + 1);
            out[c] = acc;
        }
    }
}

fn operator_diagonal(n: usize, a: &[f64]) -> Vec<f64> {
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            let ac = a[c];
            let mut acc = 0.0;
            for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                if ii < 0 || jj < 0 || ii >= n as isize || jj >= n as isize {
                    acc += ac;
                } else {
                    acc += harmonic(ac, a[ii as usize * n + jj as usize]);
                }
            }
            diag[c] = acc;
        }
    }
    diag
}

/// Solves for the pressure with Jacobi-preconditioned conjugate gradients.
pub fn solve_pressure(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(usage("grid must have at least one interior node"));
    }
    if a.len() != n * n {
        return Err(crate::error::shape(format!(
            "permeability has {} entries for an {n}x{n} grid",
            a.len()
        )));
    }
    if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(domain("permeability must be strictly positive"));
    }
    let h = 1.0 / (n as f64 + 1.0);
    let m = n * n;
    let b = vec![h * h; m];
    let b_norm = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>());
    let diag = operator_diagonal(n, a);
    let mut u = vec![0.0; m];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; m];
    let mut rz: f64 = r.iter().zip(&z).map(|(x, y)| x * y).sum();
    let max_iter = 20 * m.max(50);
    let mut residuals = Vec::new();
    for _ in 0..max_iter {
        apply_operator(n, a, &p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(x, y)| x * y).sum();
        let alpha = rz / pap;
        for k in 0..m {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rel = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()) / b_norm;
        residuals.push(rel);
        if rel <= SOLVER_TOL {
            return Ok(u);
        }
        for k in 0..m {
            z[k] = r[k] / diag[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(x, y)| x * y).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::SolverNonConvergence {
        iterations: max_iter,
        residuals,
    })
}

/// Relative residual `‖b − A u‖ / ‖b‖` of a computed pressure.
pub fn relative_residual(n: usize, a: &[f64], u: &[f64]) -> f64 {
    let h = 1.0 / (n as f64 + 1.0);
    let mut au = vec![0.0; n * n];
    apply_operator(n, a, u, &mut au);
    let mut num = 0.0;
    for v in &au {
        num += (h * h - v) * (h * h - v);
    }
    libm::sqrt(num) / (h * h * n as f64)
}

/// Draws a permeability field and solves for its pressure.
pub fn gen_darcy<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<DarcyField> {
    if n < 8 {
        return Err(usage(format!("grid must be at least 8, got {n}")));
    }
    let a = random_permeability(n, rng);
    let u = solve_pressure(n, &a)?;
    Ok(DarcyField { n, a, u })
}
