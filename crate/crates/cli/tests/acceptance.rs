//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. Runs with `harness = false`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use villani_bench::args::{CheckModel, Preset};
use villani_bench::checks::{check, fd_gradient, rel_err, CheckGradsConfig};
use villani_bench::darcy_cmd::{generate, DarcyGenConfig, ProtocolSettings};
use villani_bench::models::{
    build_potential, Activation, AttentionSetup, BuiltPotential, LoraSetup, PenaltySetup,
    PotentialKind,
};
use villani_bench::probe_cmd::{probe, ProbeConfig};
use villani_bench::sde_cmd::{simulate, SdeRunConfig};
use villani_core::attention::softmax::{
    softmax_hessian_row_tensor, softmax_into, softmax_jacobian_row,
};
use villani_core::darcy::{run_phase1, run_phase2, solve_pressure, standardize, Phase2Variant};
use villani_core::linalg::Matrix;
use villani_core::lora::{self, BoundedActivation, LoraParams, LoraSample};
use villani_core::probe::{
    gibbs_normalizability_check, stream_rng, verify_lemma_bounds, LemmaModel, Potential,
    QuadraticPotential, QuadratureGrid,
};
use villani_core::sde::{em_step, fit_decay};

type Verdict = Result<String, String>;
type Files = Vec<(String, Vec<u8>)>;
type Criterion = (&'static str, f64, fn() -> Verdict);

fn ensure(ok: bool, msg: String) -> Verdict {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gaussian_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn softmax_of(row: &[f64], beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, beta, &mut out);
    out
}

fn criterion_1() -> Verdict {
    let (mut worst_jac, mut worst_hess) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let mut rng = stream_rng(1, i);
        let t = rng.random_range(1..=8);
        let beta = rng.random_range(0.2..3.0);
        let m = gaussian_vec(t, 1.0, &mut rng);
        let s = softmax_of(&m, beta);
        let jac = softmax_jacobian_row(&s, beta).map_err(|e| e.to_string())?;
        let mut fd = Vec::with_capacity(t * t);
        for j in 0..t {
            fd.extend(fd_gradient(|p| softmax_of(p, beta)[j], &m, 1e-3));
        }
        worst_jac = worst_jac.max(rel_err(jac.as_slice(), &fd, 1e-12));
        // Hessian bound also on saturated rows.
        let wide = gaussian_vec(t, rng.random_range(0.1..10.0), &mut rng);
        for row in [&s, &softmax_of(&wide, beta)] {
            let tensor = softmax_hessian_row_tensor(row, beta).map_err(|e| e.to_string())?;
            let max = tensor.iter().fold(0.0f64, |a, h| a.max(h.abs()));
            worst_hess = worst_hess.max(max / (6.0 * beta * beta));
        }
    }
    ensure(
        worst_jac <= 1e-6 && worst_hess < 1.0,
        format!("1000 rows, jacobian rel err {worst_jac:.2e} (<= 1e-6), max |hessian| / 6 beta^2 = {worst_hess:.3} (< 1)"),
    )
}

fn grad_check(model: CheckModel, trials: usize, seed: u64) -> Result<(f64, f64, bool), String> {
    let cfg = CheckGradsConfig {
        model,
        trials,
        seed,
        ..CheckGradsConfig::default()
    };
    let rep = check(&cfg).map_err(|e| e.to_string())?;
    let worst = |prefix: &str| {
        rep.lines
            .iter()
            .find(|l| l.name.starts_with(prefix))
            .map(|l| l.worst)
            .unwrap_or(f64::NAN)
    };
    Ok((worst("gradient"), worst("laplacian"), rep.passed))
}

fn criterion_2() -> Verdict {
    let (grad, _, passed) = grad_check(CheckModel::Attention, 100, 2)?;
    let lemma = verify_lemma_bounds(
        LemmaModel::Attention {
            t: 3,
            d: 2,
            r: 2,
            n: 3,
        },
        10_000,
        2,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        passed && grad <= 1e-6 && lemma.passed(),
        format!(
            "100 instances, gradient rel err {grad:.2e} (<= 1e-6); 10^4 draws, max grad/bound {:.3e}, {} violations",
            lemma.max_grad_ratio,
            lemma.violations.len()
        ),
    )
}

fn criterion_3() -> Verdict {
    let (grad, lap, passed) = grad_check(CheckModel::Lora, 100, 3)?;
    let mut lap_ratio = 0.0f64;
    let mut violations = 0;
    for act in [BoundedActivation::tanh(), BoundedActivation::sigmoid()] {
        let rep = verify_lemma_bounds(
            LemmaModel::Lora {
                p: 3,
                d: 2,
                r: 2,
                n: 4,
                act,
            },
            10_000,
            3,
        )
        .map_err(|e| e.to_string())?;
        lap_ratio = lap_ratio.max(rep.max_laplacian_ratio);
        violations += rep.violations.len();
    }
    ensure(
        passed && grad <= 1e-6 && lap <= 1e-4 && violations == 0,
        format!(
            "gradient rel err {grad:.2e} (<= 1e-6), laplacian rel err {lap:.2e} (<= 1e-4); 2x10^4 draws, max laplacian/bound {lap_ratio:.3e}, {violations} violations"
        ),
    )
}

fn lora_potential(kind: PotentialKind, lambda: f64) -> Result<BuiltPotential, String> {
    let att = AttentionSetup {
        t: 2,
        d: 1,
        r: 1,
        n: 4,
        data_scale: 1.0,
        beta: 1.0,
    };
    let lora = LoraSetup {
        p: 1,
        d: 1,
        r: 1,
        n: 4,
        data_scale: 1.0,
        activation: Activation::Tanh,
        outer: Some(vec![1.0]),
    };
    build_potential(kind, PenaltySetup { lambda, eps: 1.0 }, &att, &lora, 6)
        .map_err(|e| e.to_string())
}

fn criterion_4() -> Verdict {
    let mut worst = 0.0f64;
    let mut orbits = 0;
    let mut draw = 0;
    while orbits < 100 {
        let mut rng = stream_rng(4, draw);
        draw += 1;
        let (p, d, r) = (
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=4),
        );
        let batch: Vec<LoraSample> = (0..4)
            .map(|_| LoraSample {
                x: gaussian_vec(d, 1.0, &mut rng),
                y: rng.random_range(-1.0..1.0),
            })
            .collect();
        let u = Matrix::from_vec(p, r, gaussian_vec(p * r, 1.0, &mut rng))
            .map_err(|e| e.to_string())?;
        let v = Matrix::from_vec(d, r, gaussian_vec(d * r, 1.0, &mut rng))
            .map_err(|e| e.to_string())?;
        let params =
            LoraParams::new(u, v, gaussian_vec(p, 1.0, &mut rng)).map_err(|e| e.to_string())?;
        let a = Matrix::from_vec(r, r, gaussian_vec(r * r, 1.0, &mut rng))
            .map_err(|e| e.to_string())?;
        // Ill-conditioned generators are rejected; draw another.
        let Ok(moved) = lora::scaling_orbit(&params, &a) else {
            continue;
        };
        let act = BoundedActivation::tanh();
        let l0 = lora::lora_loss(&batch, &params, &act).map_err(|e| e.to_string())?;
        let l1 = lora::lora_loss(&batch, &moved, &act).map_err(|e| e.to_string())?;
        worst = worst.max((l1 - l0).abs() / l0.abs());
        orbits += 1;
    }
    let grid = QuadratureGrid::default();
    let masses = |pot: &BuiltPotential| -> Result<Vec<f64>, String> {
        [10.0, 100.0, 1000.0]
            .iter()
            .map(|&l| {
                gibbs_normalizability_check(pot.as_dyn(), 1.0, l, &grid)
                    .map(|r| r.integral)
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let free = masses(&lora_potential(PotentialKind::LoraNone, 0.0)?)?;
    let held = masses(&lora_potential(PotentialKind::LoraLog, 0.1)?)?;
    let diverges = free[1] > 10.0 * free[0] && free[2] > 10.0 * free[1];
    let plateau =
        (held[2] - held[1]).abs() / held[1] < 1e-4 && (held[1] - held[0]).abs() / held[0] < 1e-4;
    ensure(
        worst <= 1e-10 && diverges && plateau,
        format!(
            "100 orbits, max rel loss change {worst:.2e} (<= 1e-10); Z(L=10,100,1000) unregularized {free:.3?}, log lambda=0.1 {held:.6?}"
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut summary = Vec::new();
    let mut ok = true;
    for kind in PotentialKind::REGULARIZED {
        let cfg = ProbeConfig {
            potential: kind,
            lambda: 1e-3,
            s: 0.1,
            dirs: 16,
            ..ProbeConfig::default()
        };
        let out = probe(&cfg).map_err(|e| e.to_string())?;
        ok &= out.passed() && out.passed_directions() == 16;
        summary.push(format!("{} {}/16", kind.name(), out.passed_directions()));
    }
    ensure(
        ok,
        format!("lambda=1e-3, s=0.1, radii 1..1e4: {}", summary.join(", ")),
    )
}

fn ou_variance() -> f64 {
    let (s, h, dim) = (0.5, 0.01, 4);
    let q = QuadraticPotential::isotropic(dim);
    let mut rng = stream_rng(6, 0);
    let mut t = vec![0.0; dim];
    let (burn, steps) = (2_000, 100_000);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for k in 0..burn + steps {
        let grad = q.gradient(&t).unwrap();
        t = em_step(&t, &grad, s, h, &mut rng).unwrap();
        if k >= burn {
            for &x in &t {
                sum += x;
                sum_sq += x * x;
            }
        }
    }
    let n = (steps * dim) as f64;
    sum_sq / n - (sum / n) * (sum / n)
}

fn criterion_6() -> Verdict {
    let var = ou_variance();
    let ou_ok = (var - 0.25).abs() <= 0.05 * 0.25;
    let mut fit_err = 0.0f64;
    let mut rng = stream_rng(6, 1);
    for _ in 0..20 {
        let (lam, eps) = (rng.random_range(0.5..4.0), rng.random_range(0.2..2.0));
        let times: Vec<f64> = (0..300).map(|k| k as f64 * 0.04 / lam).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|t| (eps + (-lam * t).exp()) * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let fit = fit_decay(&times, &values, 0.0).map_err(|e| e.to_string())?;
        fit_err = fit_err
            .max((fit.lambda_hat - lam).abs() / lam)
            .max((fit.asymptote_hat - eps).abs() / eps);
    }
    let mut chains_ok = true;
    let mut summary = Vec::new();
    for kind in PotentialKind::REGULARIZED {
        let cfg = SdeRunConfig {
            potential: kind,
            ..SdeRunConfig::default()
        };
        let out = simulate(&cfg).map_err(|e| e.to_string())?;
        match &out.fit {
            Ok(f) => {
                chains_ok &= out.passed() && f.r2 >= 0.8;
                summary.push(format!(
                    "{} lambda_hat {:.3} R2 {:.3}",
                    kind.name(),
                    f.lambda_hat,
                    f.r2
                ));
            }
            Err(e) => {
                chains_ok = false;
                summary.push(format!("{} fit failed: {e}", kind.name()));
            }
        }
    }
    ensure(
        ou_ok && fit_err <= 0.1 && chains_ok,
        format!(
            "OU variance {var:.4} vs 0.25 (5%); synthetic fit max rel err {fit_err:.3} (<= 0.1); {}",
            summary.join(", ")
        ),
    )
}

fn series_center(terms: usize) -> f64 {
    let pi4 = std::f64::consts::PI.powi(4);
    let mut sum = 0.0;
    for m in (1..terms).step_by(2) {
        for n in (1..terms).step_by(2) {
            let sign = if ((m + n - 2) / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            let (m, n) = (m as f64, n as f64);
            sum += sign * 16.0 / (pi4 * m * n * (m * m + n * n));
        }
    }
    sum
}

fn criterion_7() -> Verdict {
    let n = 64;
    let u = solve_pressure(n, &vec![1.0; n * n]).map_err(|e| e.to_string())?;
    let c = n / 2;
    let center =
        (u[(c - 1) * n + c - 1] + u[(c - 1) * n + c] + u[c * n + c - 1] + u[c * n + c]) / 4.0;
    let oracle = series_center(401);
    let solve_ok = (center - oracle).abs() < 1e-3;
    let (_, _, fd_ok) = grad_check(CheckModel::Darcy, 4, 7)?;

    let settings = ProtocolSettings::preset(Preset::Desk);
    let seeds = 1..=5u64;
    let mut rmse = [0.0f64; 3];
    let mut qk = [0.0f64; 3];
    for seed in seeds.clone() {
        let gen = DarcyGenConfig {
            grid: 16,
            count: 240,
            n_train: Some(200),
            seed,
        };
        let (fields, stats) = generate(&gen).map_err(|e| e.to_string())?;
        let (tr, te) = fields.split_at(200);
        let (train, test) = (standardize(tr, &stats), standardize(te, &stats));
        let cfg = settings.protocol(16, train.len(), test.len(), seed);
        let p1 = run_phase1(&cfg, &train, &test, &stats).map_err(|e| e.to_string())?;
        for (k, v) in Phase2Variant::ALL.into_iter().enumerate() {
            let reg = cfg.regularizer(v).map_err(|e| e.to_string())?;
            let p2 = run_phase2(&p1.result, &cfg, &reg, &train, &test, &stats)
                .map_err(|e| e.to_string())?;
            let last = p2.metrics.last().ok_or("no phase-2 metrics")?;
            rmse[k] += last.test_rmse / 5.0;
            qk[k] += last.qk_norm_sq / 5.0;
        }
    }
    let (lo, hi) = rmse.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let spread = (hi - lo) / lo;
    // ALL is [none, log, power]
    let order_ok = qk[2] <= qk[1] && qk[1] <= qk[0];
    ensure(
        solve_ok && fd_ok && spread <= 0.1 && order_ok,
        format!(
            "center {center:.6} vs series {oracle:.6}; tiny FD check {}; desk x5 seeds test RMSE none/log/power {:.4}/{:.4}/{:.4} (spread {:.1}%), qk_norm_sq {:.4}/{:.4}/{:.4}",
            if fd_ok { "ok" } else { "FAIL" },
            rmse[0],
            rmse[1],
            rmse[2],
            100.0 * spread,
            qk[0],
            qk[1],
            qk[2]
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

/// Runs the command pipeline in `root` and returns stdout of every step plus
/// all written files.
fn pipeline(root: &Path) -> Result<(Vec<Vec<u8>>, Files), String> {
    let data = root.join("d.bin");
    let at = |s: &str| root.join(s).display().to_string();
    let data_s = data.display().to_string();
    let ck = at("p1/checkpoint.bin");
    let model = at("p2/model.bin");
    let steps: Vec<Vec<String>> = [
        vec![
            "check-grads",
            "--model",
            "attention",
            "--trials",
            "5",
            "--out",
            &at("cg_att"),
        ],
        vec![
            "check-grads",
            "--model",
            "lora",
            "--trials",
            "5",
            "--out",
            &at("cg_lora"),
        ],
        vec![
            "check-grads",
            "--model",
            "darcy",
            "--trials",
            "2",
            "--out",
            &at("cg_darcy"),
        ],
        vec![
            "probe-villani",
            "--potential",
            "att-log",
            "--out",
            &at("probe"),
        ],
        vec![
            "train-sde",
            "--potential",
            "lora-power",
            "--steps",
            "2000",
            "--chains",
            "8",
            "--out",
            &at("sde"),
        ],
        vec!["darcy", "gen", "--grid", "8", "--n", "24", "--out", &data_s],
        vec![
            "darcy",
            "train",
            "--phase",
            "1",
            "--preset",
            "tiny",
            "--data",
            &data_s,
            "--out",
            &at("p1"),
        ],
        vec![
            "darcy",
            "train",
            "--phase",
            "2",
            "--preset",
            "tiny",
            "--reg",
            "log",
            "--data",
            &data_s,
            "--checkpoint",
            &ck,
            "--out",
            &at("p2"),
        ],
        vec![
            "darcy",
            "eval",
            "--data",
            &data_s,
            "--checkpoint",
            &model,
            "--out",
            &at("eval"),
        ],
    ]
    .iter()
    .map(|v| v.iter().map(|s| s.to_string()).collect())
    .collect();
    let mut outputs = Vec::new();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_vb"))
            .args(["--threads", "1", "--seed", "11"])
            .args(&args)
            .env_remove("VB_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "`vb {}` exited with {:?}",
                args.join(" "),
                out.status.code()
            ));
        }
        outputs.push(out.stdout);
    }
    Ok((outputs, snapshot(root)))
}

fn replace_bytes(haystack: &[u8], needle: &[u8], with: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(haystack.len());
    let mut i = 0;
    while i < haystack.len() {
        if !needle.is_empty() && haystack[i..].starts_with(needle) {
            out.extend_from_slice(with);
            i += needle.len();
        } else {
            out.push(haystack[i]);
            i += 1;
        }
    }
    out
}

fn criterion_8() -> Verdict {
    let (a, b) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    let (out_a, files_a) = pipeline(a.path())?;
    let (out_b, files_b) = pipeline(b.path())?;
    // Output paths differ between the two roots; everything else must match
    // byte for byte.
    let strip = |bytes: &[u8], root: &Path| {
        replace_bytes(bytes, root.display().to_string().as_bytes(), b"<root>")
    };
    let strip_all = |outs: &[Vec<u8>], root: &Path| -> Vec<Vec<u8>> {
        outs.iter().map(|o| strip(o, root)).collect()
    };
    let strip_files = |files: &[(String, Vec<u8>)], root: &Path| -> Vec<(String, Vec<u8>)> {
        files
            .iter()
            .map(|(n, b)| (n.clone(), strip(b, root)))
            .collect()
    };
    let n_files = files_a.len();
    let same_stdout = strip_all(&out_a, a.path()) == strip_all(&out_b, b.path());
    let same_files = strip_files(&files_a, a.path()) == strip_files(&files_b, b.path());
    ensure(
        same_stdout && same_files && n_files > 0,
        format!("9 commands run twice with --threads 1: {n_files} files, stdout identical {same_stdout}, files identical {same_files}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("softmax calculus", 10.0, criterion_1),
        ("attention gradients", 60.0, criterion_2),
        ("lora calculus", 60.0, criterion_3),
        ("scaling orbit and gibbs quadrature", 30.0, criterion_4),
        ("villani probe", 300.0, criterion_5),
        ("sde sanity", 600.0, criterion_6),
        ("darcy", 1800.0, criterion_7),
        ("determinism", f64::INFINITY, criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = run();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < *budget;
        let (ok, detail) = match verdict {
            Ok(msg) => (in_time, msg),
            Err(msg) => (false, msg),
        };
        if !ok {
            failed += 1;
        }
        let limit = if budget.is_finite() {
            format!(", limit {budget:.0} s")
        } else {
            String::new()
        };
        println!(
            "{} criterion {} ({name}): {detail} [{secs:.1} s{limit}]",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
