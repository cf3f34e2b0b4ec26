mod common;

use common::*;
use proptest::prelude::*;
use villani_core::darcy::model::CONV_HIDDEN_CHANNELS;
use villani_core::darcy::solver::{
    random_permeability, relative_residual, PERMEABILITY_HIGH, PERMEABILITY_LOW,
};
use villani_core::darcy::*;
use villani_core::probe::stream_rng;

/// Eigenfunction series for `−Δu = 1` on the unit square at its center.
fn series_center(terms: usize) -> f64 {
    let pi4 = std::f64::consts::PI.powi(4);
    let mut sum = 0.0;
    for m in (1..terms).step_by(2) {
        for n in (1..terms).step_by(2) {
            // sin(mπ/2) sin(nπ/2) = (−1)^{(m+n−2)/2} for odd m, n
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

fn center_value(u: &[f64], n: usize) -> f64 {
    let c = n / 2;
    (u[(c - 1) * n + c - 1] + u[(c - 1) * n + c] + u[c * n + c - 1] + u[c * n + c]) / 4.0
}

#[test]
fn constant_coefficient_matches_series() {
    let oracle = series_center(401);
    assert!((oracle - 0.073671).abs() < 1e-6, "{oracle}");
    let n = 64;
    let u = solve_pressure(n, &vec![1.0; n * n]).unwrap();
    assert!((center_value(&u, n) - oracle).abs() < 1e-3);
    assert!(relative_residual(n, &vec![1.0; n * n], &u) <= 1e-8);
}

#[test]
fn pressure_scales_inversely_with_coefficient() {
    let n = 16;
    let u1 = solve_pressure(n, &vec![1.0; n * n]).unwrap();
    for c in [0.5, 3.0, 12.0] {
        let uc = solve_pressure(n, &vec![c; n * n]).unwrap();
        for (a, b) in u1.iter().zip(&uc) {
            assert!((a / c - b).abs() <= 1e-9 * a.abs());
        }
    }
}

#[test]
fn generated_samples_obey_maximum_principle() {
    for i in 0..20 {
        let f = gen_darcy(16, &mut stream_rng(3, i)).unwrap();
        assert!(f
            .a
            .iter()
            .all(|&v| v == PERMEABILITY_LOW || v == PERMEABILITY_HIGH));
        assert!(f.u.iter().all(|&v| v > 0.0), "sample {i}");
        assert!(relative_residual(16, &f.a, &f.u) <= 1e-8);
        // u is bracketed by the constant-coefficient solutions at 12 and 3
        let hi = solve_pressure(16, &vec![PERMEABILITY_LOW; 256]).unwrap();
        let lo = solve_pressure(16, &vec![PERMEABILITY_HIGH; 256]).unwrap();
        let max_u = f.u.iter().cloned().fold(0.0, f64::max);
        assert!(max_u <= hi.iter().cloned().fold(0.0, f64::max));
        assert!(max_u >= lo.iter().cloned().fold(0.0, f64::max));
    }
}

#[test]
fn permeability_uses_both_values() {
    let a = random_permeability(32, &mut rng(8));
    let high = a.iter().filter(|&&v| v == PERMEABILITY_HIGH).count();
    assert!(high > 100 && high < 924, "{high}");
}

#[test]
fn small_grid_is_rejected() {
    assert!(gen_darcy(7, &mut rng(0)).is_err());
    assert!(gen_dataset(4, 2, 0).is_err());
}

#[test]
fn dataset_samples_use_independent_streams() {
    let all = gen_dataset(8, 3, 5).unwrap();
    let third = gen_darcy(8, &mut stream_rng(5, 2)).unwrap();
    assert_eq!(all[2], third);
    assert_ne!(all[0].a, all[1].a);
}

#[test]
fn standardization_properties() {
    let data = gen_dataset(8, 12, 1).unwrap();
    let stats = NormStats::fit(&data).unwrap();
    let split = standardize(&data, &stats);
    let flat_u: Vec<f64> = split.targets.concat();
    let flat_a: Vec<f64> = split.inputs.concat();
    for v in [flat_u, flat_a] {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
    }
    let back = stats.denormalize_u(&split.targets[3]);
    assert!(rel_err(&back, &data[3].u, 1e-300) < 1e-12);

    // standardizing already standardized data is the identity
    let again: Vec<DarcyField> = (0..data.len())
        .map(|i| DarcyField {
            n: 8,
            a: split.inputs[i].clone(),
            u: split.targets[i].clone(),
        })
        .collect();
    let stats2 = NormStats::fit(&again).unwrap();
    let split2 = standardize(&again, &stats2);
    for (x, y) in split2.targets.concat().iter().zip(split.targets.concat()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn constant_field_cannot_be_standardized() {
    let f = DarcyField {
        n: 8,
        a: vec![3.0; 64],
        u: vec![1.0; 64],
    };
    assert!(NormStats::fit(&[f.clone(), f]).is_err());
    assert!(NormStats::fit(&[]).is_err());
}

#[test]
fn patch_examples() {
    let field: Vec<f64> = (0..64).map(|v| v as f64).collect();
    let tok = patchify(&field, 8, 4).unwrap();
    assert_eq!(tok.shape(), (4, 16));
    assert_eq!(unpatchify(&tok, 8, 4).unwrap(), field);
    // checkerboard of 4×4 blocks: token k is constant with the block's colour
    let board: Vec<f64> = (0..64)
        .map(|k| (((k / 8) / 4 + (k % 8) / 4) % 2) as f64)
        .collect();
    let tok = patchify(&board, 8, 4).unwrap();
    for (k, want) in [0.0, 1.0, 1.0, 0.0].iter().enumerate() {
        assert!(tok.row(k).iter().all(|v| v == want));
    }
    assert!(patchify(&field, 8, 3).is_err());
}

proptest! {
    #[test]
    fn patchify_is_a_bijection(side in 1usize..=8, p in 1usize..=8, seed in 0u64..100) {
        let n = side * p;
        prop_assume!(n <= 64);
        let field = gaussian_vec(n * n, 1.0, &mut rng(seed));
        let tok = patchify(&field, n, p).unwrap();
        prop_assert_eq!(tok.shape(), (side * side, p * p));
        prop_assert_eq!(unpatchify(&tok, n, p).unwrap(), field);
    }
}

fn tiny_setup(encoder: EncoderKind) -> (DarcyModel, Vec<f64>, Vec<f64>) {
    let dims = match encoder {
        EncoderKind::Linear => ProtocolConfig::tiny().dims(),
        // one conv output channel per pixel of a 2×2 patch
        EncoderKind::Conv => ModelDims {
            grid: 8,
            patch: 2,
            d: 4,
            r: 3,
            encoder,
        },
    };
    let mut model = DarcyModel::init(dims, &mut rng(21)).unwrap();
    // move off the zero biases so every path carries signal
    let mut g = rng(22);
    for v in model.params.iter_mut() {
        *v += 0.1 * gaussian_vec(1, 1.0, &mut g)[0];
    }
    let x = gaussian_vec(64, 1.0, &mut g);
    let y = gaussian_vec(64, 1.0, &mut g);
    (model, x, y)
}

fn loss_of(model: &DarcyModel, x: &[f64], y: &[f64]) -> f64 {
    let mut sink = vec![0.0; model.params.len()];
    model
        .sample_loss_and_grad(x, y, 1.0, BackwardMode::Full, &mut sink)
        .unwrap()
}

fn check_full_gradient(encoder: EncoderKind) {
    let (model, x, y) = tiny_setup(encoder);
    let mut grad = vec![0.0; model.params.len()];
    model
        .sample_loss_and_grad(&x, &y, 1.0, BackwardMode::Full, &mut grad)
        .unwrap();
    let fd = fd_gradient(
        |p| {
            let mut m = model.clone();
            m.params.copy_from_slice(p);
            loss_of(&m, &x, &y)
        },
        &model.params,
        1e-3,
    );
    for group in model.layout.groups() {
        let r = model.layout.range(group);
        let e = rel_err(&grad[r.clone()], &fd[r], 1e-8);
        assert!(e <= 1e-4, "{encoder:?} {group:?}: rel err {e}");
    }
}

#[test]
fn linear_model_gradient_matches_finite_differences() {
    check_full_gradient(EncoderKind::Linear);
}

#[test]
fn conv_model_gradient_matches_finite_differences() {
    check_full_gradient(EncoderKind::Conv);
    let (model, _, _) = tiny_setup(EncoderKind::Conv);
    assert_eq!(
        model.layout.shape(ParamGroup::Conv1K).0,
        CONV_HIDDEN_CHANNELS
    );
}

#[test]
fn query_key_mode_matches_full_backward_bitwise() {
    for encoder in [EncoderKind::Linear, EncoderKind::Conv] {
        let (model, x, y) = tiny_setup(encoder);
        let mut full = vec![0.0; model.params.len()];
        let mut qk = vec![0.0; model.params.len()];
        model
            .sample_loss_and_grad(&x, &y, 0.5, BackwardMode::Full, &mut full)
            .unwrap();
        model
            .sample_loss_and_grad(&x, &y, 0.5, BackwardMode::QueryKeyOnly, &mut qk)
            .unwrap();
        let active =
            model.layout.range(ParamGroup::Wq).start..model.layout.range(ParamGroup::Wk).end;
        for (k, (a, b)) in full.iter().zip(&qk).enumerate() {
            if active.contains(&k) {
                assert_eq!(a.to_bits(), b.to_bits());
            } else {
                assert_eq!(*b, 0.0);
            }
        }
    }
}

#[test]
fn zero_decoder_cuts_the_graph() {
    let (mut model, x, y) = tiny_setup(EncoderKind::Linear);
    for g in [ParamGroup::Dec1W, ParamGroup::Dec2W] {
        model.group_slice_mut(g).iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = model.group_slice(ParamGroup::Dec2B).to_vec();
    let pred = model.predict(&x).unwrap();
    let tokens = patchify(&pred, 8, 4).unwrap();
    for k in 0..tokens.rows() {
        assert_eq!(tokens.row(k), bias.as_slice());
    }
    let mut grad = vec![0.0; model.params.len()];
    model
        .sample_loss_and_grad(&x, &y, 1.0, BackwardMode::Full, &mut grad)
        .unwrap();
    for g in [
        ParamGroup::EmbedW,
        ParamGroup::EmbedB,
        ParamGroup::Pos,
        ParamGroup::Wq,
        ParamGroup::Wk,
        ParamGroup::Wv,
        ParamGroup::Dec1B,
    ] {
        assert!(
            grad[model.layout.range(g)].iter().all(|&v| v == 0.0),
            "{g:?}"
        );
    }
    assert!(grad[model.layout.range(ParamGroup::Dec2B)]
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn shape_mismatch_is_an_error() {
    let (model, x, _) = tiny_setup(EncoderKind::Linear);
    assert!(model.predict(&x[..10]).is_err());
    let mut short = vec![0.0; 3];
    assert!(model
        .sample_loss_and_grad(&x, &x, 1.0, BackwardMode::Full, &mut short)
        .is_err());
}

struct TinyRun {
    cfg: ProtocolConfig,
    train: Split,
    test: Split,
    stats: NormStats,
}

fn tiny_run() -> TinyRun {
    let cfg = ProtocolConfig {
        seed: 4,
        ..ProtocolConfig::tiny()
    };
    let data = gen_dataset(cfg.grid, cfg.n_train + cfg.n_test, cfg.seed).unwrap();
    let (tr, te) = data.split_at(cfg.n_train);
    let stats = NormStats::fit(tr).unwrap();
    TinyRun {
        cfg,
        train: standardize(tr, &stats),
        test: standardize(te, &stats),
        stats,
    }
}

#[test]
fn metrics_of_trivial_predictors() {
    let run = tiny_run();
    let (mut model, _, _) = tiny_setup(EncoderKind::Linear);
    for g in [
        ParamGroup::Dec1W,
        ParamGroup::Dec2W,
        ParamGroup::Dec2B,
        ParamGroup::Wq,
        ParamGroup::Wk,
    ] {
        model.group_slice_mut(g).iter_mut().for_each(|v| *v = 0.0);
    }
    let m = compute_metrics(&model, 0, &run.train, &run.test, &run.stats).unwrap();
    // zero output on standardized targets
    assert!((m.train_rmse - 1.0).abs() < 1e-10);
    assert!((m.test_rmse - 1.0).abs() < 0.5);
    assert_eq!(m.qk_norm_sq, 0.0);
    assert!((m.gen_gap - (m.test_rmse.powi(2) - 1.0)).abs() < 1e-10);
    let empty = Split {
        n: 8,
        inputs: vec![],
        targets: vec![],
    };
    assert!(evaluate_split(&model, &empty, &run.stats).is_err());
}

#[test]
fn protocol_is_deterministic() {
    let run = tiny_run();
    let a = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    let b = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.metrics.len(), run.cfg.phase1.epochs);
    assert_eq!(a.metrics[0].epoch, 1);
    for v in Phase2Variant::ALL {
        let reg = run.cfg.regularizer(v).unwrap();
        let x = run_phase2(&a.result, &run.cfg, &reg, &run.train, &run.test, &run.stats).unwrap();
        let y = run_phase2(&a.result, &run.cfg, &reg, &run.train, &run.test, &run.stats).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn phase_two_only_moves_query_and_key() {
    let run = tiny_run();
    let p1 = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    let reg = run.cfg.regularizer(Phase2Variant::Log).unwrap();
    let p2 = run_phase2(
        &p1.result, &run.cfg, &reg, &run.train, &run.test, &run.stats,
    )
    .unwrap();
    for g in p2.result.layout.groups() {
        let same = p2.result.group_slice(g) == p1.result.model.group_slice(g);
        match g {
            ParamGroup::Wq | ParamGroup::Wk => assert!(!same),
            _ => assert!(same, "{g:?} moved"),
        }
    }
}

#[test]
fn zero_lambda_matches_unregularized_bitwise() {
    let run = tiny_run();
    let p1 = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    let cfg = ProtocolConfig {
        lambda_log: 0.0,
        lambda_power: 0.0,
        ..run.cfg
    };
    let none = run_phase2(
        &p1.result,
        &cfg,
        &cfg.regularizer(Phase2Variant::None).unwrap(),
        &run.train,
        &run.test,
        &run.stats,
    )
    .unwrap();
    for v in [Phase2Variant::Log, Phase2Variant::Power] {
        let out = run_phase2(
            &p1.result,
            &cfg,
            &cfg.regularizer(v).unwrap(),
            &run.train,
            &run.test,
            &run.stats,
        )
        .unwrap();
        assert_eq!(out, none);
    }
}

#[test]
fn strong_power_penalty_shrinks_query_key_norm() {
    let run = tiny_run();
    let p1 = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    let cfg = ProtocolConfig {
        lambda_power: 1.0,
        ..run.cfg
    };
    let s = |v| {
        let out = run_phase2(
            &p1.result,
            &cfg,
            &cfg.regularizer(v).unwrap(),
            &run.train,
            &run.test,
            &run.stats,
        )
        .unwrap();
        out.metrics.last().unwrap().qk_norm_sq
    };
    assert!(s(Phase2Variant::Power) < s(Phase2Variant::None));
}

#[test]
fn sgld_phase_two_runs_and_is_reproducible() {
    let run = tiny_run();
    let p1 = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    let cfg = ProtocolConfig {
        phase2_optimizer: Phase2Optimizer::Sgld { s: 1e-4 },
        ..run.cfg
    };
    let reg = cfg.regularizer(Phase2Variant::Power).unwrap();
    let a = run_phase2(&p1.result, &cfg, &reg, &run.train, &run.test, &run.stats).unwrap();
    let b = run_phase2(&p1.result, &cfg, &reg, &run.train, &run.test, &run.stats).unwrap();
    assert_eq!(a, b);
    let adam = run_phase2(
        &p1.result, &run.cfg, &reg, &run.train, &run.test, &run.stats,
    )
    .unwrap();
    assert_ne!(a.result, adam.result);
    let bad = ProtocolConfig {
        phase2_optimizer: Phase2Optimizer::Sgld { s: -1.0 },
        ..run.cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_mismatch_is_rejected() {
    let run = tiny_run();
    let p1 = run_phase1(&run.cfg, &run.train, &run.test, &run.stats).unwrap();
    let other = ProtocolConfig {
        d: 8,
        r: 8,
        ..run.cfg
    };
    let reg = other.regularizer(Phase2Variant::None).unwrap();
    assert!(run_phase2(&p1.result, &other, &reg, &run.train, &run.test, &run.stats).is_err());
}

#[test]
fn presets_match_the_published_setup() {
    let p = ProtocolConfig::full();
    assert_eq!(
        (p.grid, p.patch, p.d, p.r, p.n_train, p.n_test),
        (64, 4, 64, 64, 900, 124)
    );
    assert_eq!(
        (p.phase1.epochs, p.phase1.batch, p.phase2.epochs),
        (500, 32, 100)
    );
    assert_eq!(
        (p.phase1.lr, p.lambda_log, p.lambda_power, p.epsilon),
        (1e-3, 1e-5, 1e-4, 1e-6)
    );
    let d = ProtocolConfig::desk();
    assert_eq!(
        (d.grid, d.patch, d.d, d.r, d.n_train, d.n_test),
        (16, 4, 16, 16, 200, 40)
    );
    assert_eq!(
        (d.phase1.epochs, d.phase1.batch, d.phase2.epochs),
        (150, 16, 50)
    );
    assert_eq!(
        (d.lambda_log, d.lambda_power, d.epsilon),
        (1e-5, 1e-4, 1e-6)
    );
}
