#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use villani_core::linalg::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn gaussian_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Central difference with one Richardson step, error O(h⁴).
pub fn richardson<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Gradient of `f` at `x` by Richardson-extrapolated central differences.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            richardson(
                |e| {
                    p[k] = x[k] + e;
                    let v = f(&p);
                    p[k] = x[k];
                    v
                },
                h,
            )
        })
        .collect()
}

/// Laplacian by Richardson-extrapolated second differences along each axis.
pub fn fd_laplacian_richardson<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> f64 {
    let f0 = f(x);
    let mut p = x.to_vec();
    let mut second = |k: usize, e: f64| {
        p[k] = x[k] + e;
        let a = f(&p);
        p[k] = x[k] - e;
        let b = f(&p);
        p[k] = x[k];
        (a - 2.0 * f0 + b) / (e * e)
    };
    let mut total = 0.0;
    for k in 0..x.len() {
        let s1 = second(k, h);
        let s2 = second(k, h / 2.0);
        total += (4.0 * s2 - s1) / 3.0;
    }
    total
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(floor)
}

pub fn rel_err_scalar(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}
