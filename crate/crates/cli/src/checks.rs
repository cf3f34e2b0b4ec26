//! `vb check-grads`: analytic derivatives against finite-difference oracles.

use anyhow::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use villani_core::attention::{self, softmax, AttnParams, AttnSample};
use villani_core::darcy::{BackwardMode, DarcyModel, EncoderKind, ModelDims, ParamGroup};
use villani_core::linalg::{norm2, Matrix};
use villani_core::lora::{self, BoundedActivation, LoraParams, LoraSample};
use villani_core::probe::{stream_rng, verify_lemma_bounds, LemmaModel, LemmaReport};

use crate::args::{CheckGradsArgs, CheckModel};
use crate::config::{echo, invalid, set, usage, OutDir};
use crate::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckGradsConfig {
    pub model: CheckModel,
    pub trials: usize,
    pub seed: u64,
    /// Largest `t`, `d`, `r` (and `p`) drawn for attention and LoRA instances.
    pub max_dim: usize,
    pub grad_tol: f64,
    pub laplacian_tol: f64,
    pub darcy_tol: f64,
    pub orbit_tol: f64,
}

impl Default for CheckGradsConfig {
    fn default() -> Self {
        Self {
            model: CheckModel::Lora,
            trials: 20,
            seed: 0,
            max_dim: 6,
            grad_tol: 1e-6,
            laplacian_tol: 1e-4,
            darcy_tol: 1e-4,
            orbit_tol: 1e-10,
        }
    }
}

impl CheckGradsConfig {
    pub fn apply(&mut self, args: &CheckGradsArgs, seed: Option<u64>) {
        set(&mut self.model, args.model);
        set(&mut self.trials, args.trials);
        set(&mut self.seed, seed);
    }
}

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub worst: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub config: CheckGradsConfig,
    pub lines: Vec<CheckLine>,
    pub passed: bool,
}

/// Central difference with one Richardson step.
fn richardson(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
    (4.0 * d2 - d1) / 3.0
}

pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
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

/// Sum of Richardson-extrapolated second differences along each axis.
pub fn fd_laplacian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> f64 {
    let f0 = f(x);
    let mut p = x.to_vec();
    let mut total = 0.0;
    for k in 0..x.len() {
        let mut second = |step: f64| {
            p[k] = x[k] + step;
            let plus = f(&p);
            p[k] = x[k] - step;
            let minus = f(&p);
            p[k] = x[k];
            (plus - 2.0 * f0 + minus) / (step * step)
        };
        let coarse = second(h);
        let fine = second(h / 2.0);
        total += (4.0 * fine - coarse) / 3.0;
    }
    total
}

pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(b).max(floor)
}

fn gaussian<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn gaussian_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

struct Worst(Vec<CheckLine>);

impl Worst {
    fn line(&mut self, name: &str, worst: f64, limit: f64, strict: bool) {
        let passed = if strict {
            worst < limit
        } else {
            worst <= limit
        };
        self.0.push(CheckLine {
            name: name.to_string(),
            worst,
            limit,
            passed: passed && worst.is_finite(),
        });
    }

    fn lemma(&mut self, label: &str, rep: &LemmaReport) {
        self.line(
            &format!("{label} gradient bound ratio"),
            rep.max_grad_ratio,
            1.0,
            false,
        );
        self.line(
            &format!("{label} laplacian bound ratio"),
            rep.max_laplacian_ratio,
            1.0,
            false,
        );
        self.line(
            &format!("{label} bound violations"),
            rep.violations.len() as f64,
            0.0,
            false,
        );
    }
}

fn check_attention(cfg: &CheckGradsConfig) -> Result<Vec<CheckLine>> {
    let (mut grad, mut lap, mut hess) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..cfg.trials {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let t = rng.random_range(1..=cfg.max_dim);
        let d = rng.random_range(1..=cfg.max_dim);
        let r = rng.random_range(1..=cfg.max_dim);
        let n = rng.random_range(1..=3);
        let batch = (0..n)
            .map(|_| AttnSample::new(gaussian(t, d, 0.8, &mut rng), gaussian(t, d, 0.8, &mut rng)))
            .collect::<villani_core::Result<Vec<_>>>()?;
        let beta = rng.random_range(0.5..2.0);
        let params = AttnParams::new(
            gaussian(d, r, 0.7, &mut rng),
            gaussian(d, r, 0.7, &mut rng),
            gaussian(d, d, 0.5, &mut rng),
            beta,
        )?;
        let risk = |p: &[f64]| {
            attention::empirical_risk(&batch, &params.with_factor_point(p).unwrap()).unwrap()
        };
        let point = params.factor_point();
        let ana = attention::empirical_risk_grad(&batch, &params)?.flatten();
        grad = grad.max(rel_err(&ana, &fd_gradient(risk, &point, 1e-3), 1e-10));
        let exact = attention::empirical_risk_laplacian(&batch, &params)?;
        let fd = fd_laplacian(risk, &point, 1e-2);
        lap = lap.max((exact - fd).abs() / fd.abs().max(1e-6));
        for s in &batch {
            let m = attention::scores(&s.x, &params.wq, &params.wk)?;
            let probs = softmax::row_softmax(&m, beta)?;
            for i in 0..t {
                let tensor = softmax::softmax_hessian_row_tensor(probs.row(i), beta)?;
                let max = tensor.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                hess = hess.max(max / (6.0 * beta * beta));
            }
        }
    }
    let mut w = Worst(Vec::new());
    w.line("gradient rel err", grad, cfg.grad_tol, false);
    w.line("laplacian rel err", lap, cfg.laplacian_tol, false);
    w.line("max softmax hessian entry / 6 beta^2", hess, 1.0, true);
    let rep = verify_lemma_bounds(
        LemmaModel::Attention {
            t: 3,
            d: 2,
            r: 2,
            n: 3,
        },
        cfg.trials,
        cfg.seed,
    )?;
    w.lemma("lemma", &rep);
    Ok(w.0)
}

fn check_lora(cfg: &CheckGradsConfig) -> Result<Vec<CheckLine>> {
    let (mut grad, mut lap, mut orbit) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..cfg.trials {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let p = rng.random_range(1..=cfg.max_dim);
        let d = rng.random_range(1..=cfg.max_dim);
        let r = rng.random_range(1..=cfg.max_dim);
        let n = rng.random_range(1..=4);
        let act = if trial % 2 == 0 {
            BoundedActivation::tanh()
        } else {
            BoundedActivation::sigmoid()
        };
        let batch: Vec<LoraSample> = (0..n)
            .map(|_| LoraSample {
                x: gaussian_vec(d, 1.0, &mut rng),
                y: rng.random_range(-1.0..1.0),
            })
            .collect();
        let a = LoraParams::default_outer_weights(p, &mut rng);
        let params = LoraParams::new(
            gaussian(p, r, 0.8, &mut rng),
            gaussian(d, r, 0.8, &mut rng),
            a,
        )?;
        let loss = |t: &[f64]| {
            lora::lora_loss(&batch, &params.with_factor_point(t).unwrap(), &act).unwrap()
        };
        let point = params.factor_point();
        let ana = lora::lora_loss_grad(&batch, &params, &act)?;
        grad = grad.max(rel_err(&ana, &fd_gradient(loss, &point, 1e-3), 1e-10));
        let exact = lora::lora_laplacian(&batch, &params, &act)?;
        let fd = fd_laplacian(loss, &point, 1e-2);
        lap = lap.max((exact - fd).abs() / fd.abs().max(1e-6));
        let gen = Matrix::from_fn(r, r, |i, j| {
            let g: f64 = rng.sample(StandardNormal);
            if i == j {
                1.0 + 0.3 * g
            } else {
                0.3 * g
            }
        });
        if let Ok(moved) = lora::scaling_orbit(&params, &gen) {
            let l0 = lora::lora_loss(&batch, &params, &act)?;
            let l1 = lora::lora_loss(&batch, &moved, &act)?;
            orbit = orbit.max((l1 - l0).abs() / l0.abs().max(1e-300));
        }
    }
    let mut w = Worst(Vec::new());
    w.line("gradient rel err", grad, cfg.grad_tol, false);
    w.line("laplacian rel err", lap, cfg.laplacian_tol, false);
    w.line("orbit loss rel change", orbit, cfg.orbit_tol, false);
    for (label, act) in [
        ("tanh lemma", BoundedActivation::tanh()),
        ("sigmoid lemma", BoundedActivation::sigmoid()),
    ] {
        let rep = verify_lemma_bounds(
            LemmaModel::Lora {
                p: 3,
                d: 2,
                r: 2,
                n: 4,
                act,
            },
            cfg.trials,
            cfg.seed,
        )?;
        w.lemma(label, &rep);
    }
    Ok(w.0)
}

/// Model dimensions of the Darcy check: the tiny preset with the linear
/// encoder, and a 2×2-patch variant that gives the conv encoder one output
/// channel.
pub fn darcy_check_dims(encoder: EncoderKind) -> ModelDims {
    match encoder {
        EncoderKind::Linear => ModelDims {
            grid: 8,
            patch: 4,
            d: 4,
            r: 4,
            encoder,
        },
        EncoderKind::Conv => ModelDims {
            grid: 8,
            patch: 2,
            d: 4,
            r: 3,
            encoder,
        },
    }
}

fn check_darcy(cfg: &CheckGradsConfig) -> Result<Vec<CheckLine>> {
    let mut worst = 0.0f64;
    let mut masked_mismatches = 0usize;
    for trial in 0..cfg.trials {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let encoder = if trial % 2 == 0 {
            EncoderKind::Linear
        } else {
            EncoderKind::Conv
        };
        let dims = darcy_check_dims(encoder);
        let mut model = DarcyModel::init(dims, &mut rng)?;
        for v in model.params.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let npix = dims.grid * dims.grid;
        let x = gaussian_vec(npix, 1.0, &mut rng);
        let y = gaussian_vec(npix, 1.0, &mut rng);
        let mut grad = vec![0.0; model.params.len()];
        model.sample_loss_and_grad(&x, &y, 1.0, BackwardMode::Full, &mut grad)?;
        let loss = |p: &[f64]| {
            let mut m = model.clone();
            m.params.copy_from_slice(p);
            let mut sink = vec![0.0; p.len()];
            m.sample_loss_and_grad(&x, &y, 1.0, BackwardMode::Full, &mut sink)
                .unwrap()
        };
        let fd = fd_gradient(loss, &model.params, 1e-3);
        for g in model.layout.groups() {
            let range = model.layout.range(g);
            worst = worst.max(rel_err(&grad[range.clone()], &fd[range], 1e-8));
        }
        let mut qk = vec![0.0; model.params.len()];
        model.sample_loss_and_grad(&x, &y, 1.0, BackwardMode::QueryKeyOnly, &mut qk)?;
        let active =
            model.layout.range(ParamGroup::Wq).start..model.layout.range(ParamGroup::Wk).end;
        masked_mismatches += grad
            .iter()
            .zip(&qk)
            .enumerate()
            .filter(|(k, (a, b))| {
                if active.contains(k) {
                    a.to_bits() != b.to_bits()
                } else {
                    **b != 0.0
                }
            })
            .count();
    }
    let mut w = Worst(Vec::new());
    w.line("per-group gradient rel err", worst, cfg.darcy_tol, false);
    w.line(
        "query/key-only mismatches",
        masked_mismatches as f64,
        0.0,
        false,
    );
    Ok(w.0)
}

fn validate(cfg: &CheckGradsConfig) -> Result<()> {
    if cfg.trials == 0 {
        return Err(usage("trials must be at least 1"));
    }
    if cfg.max_dim == 0 {
        return Err(usage("max_dim must be at least 1"));
    }
    Ok(())
}

pub fn check(cfg: &CheckGradsConfig) -> Result<CheckReport> {
    validate(cfg)?;
    let lines = match cfg.model {
        CheckModel::Attention => check_attention(cfg),
        CheckModel::Lora => check_lora(cfg),
        CheckModel::Darcy => check_darcy(cfg),
    }
    .map_err(|e| match e.downcast::<villani_core::Error>() {
        Ok(core) => invalid(core),
        Err(e) => e,
    })?;
    let passed = lines.iter().all(|l| l.passed);
    Ok(CheckReport {
        config: cfg.clone(),
        lines,
        passed,
    })
}

pub fn run(cfg: &CheckGradsConfig, out: &OutDir) -> Result<Outcome> {
    validate(cfg)?;
    echo(cfg)?;
    let report = check(cfg)?;
    for l in &report.lines {
        println!(
            "{:<40} worst {:<12.4e} limit {:<10.3e} {}",
            l.name,
            l.worst,
            l.limit,
            if l.passed { "ok" } else { "FAIL" }
        );
    }
    out.write_json("check_grads.json", &report)?;
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed {
        Outcome::Pass
    } else {
        Outcome::Failed
    })
}
