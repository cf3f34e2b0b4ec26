use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use villani_bench::formats::{read_dataset, read_sidecar};
use villani_core::darcy::gen_dataset;

fn vb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vb"))
        .args(args)
        .env_remove("VB_THREADS")
        .output()
        .expect("vb runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[idx].to_string())
        .collect()
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vb(&["check-grads", "--trials", "0"])), 2);
    assert_eq!(code(&vb(&["probe-villani", "--bogus"])), 2);
    assert_eq!(code(&vb(&["probe-villani", "--s", "0"])), 2);
    let missing = dir.path().join("missing.bin");
    assert_eq!(code(&vb(&["darcy", "train", "--data", p(&missing)])), 2);
    assert_eq!(code(&vb(&["darcy", "eval", "--data", p(&missing)])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"no_such_field\": 1}").unwrap();
    assert_eq!(code(&vb(&["--config", p(&bad), "train-sde"])), 2);
}

#[test]
fn lora_gradient_checks_pass() {
    let out = vb(&[
        "check-grads",
        "--model",
        "lora",
        "--trials",
        "50",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn attention_report_has_hessian_margin() {
    let dir = tempfile::tempdir().unwrap();
    let out = vb(&[
        "check-grads",
        "--model",
        "attention",
        "--trials",
        "100",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("max softmax hessian entry / 6 beta^2"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("check_grads.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["config"]["trials"], 100);
}

#[test]
fn darcy_gradient_check_passes() {
    assert_eq!(
        code(&vb(&["check-grads", "--model", "darcy", "--trials", "4"])),
        0
    );
}

#[test]
fn lora_log_probe_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = vb(&[
        "probe-villani",
        "--potential",
        "lora-log",
        "--lambda",
        "1e-3",
        "--s",
        "0.1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(csv_column(&dir.path().join("probe.csv"), "f").len(), 16 * 5);
}

#[test]
fn unregularized_lora_probe_reports_orbit() {
    let out = vb(&["probe-villani", "--potential", "lora-log", "--lambda", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("non-confining orbit detected"));
}

#[test]
fn attention_power_probe_is_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let out = vb(&[
        "probe-villani",
        "--potential",
        "att-power",
        "--eps",
        "0.5",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let f: Vec<f64> = csv_column(&dir.path().join("probe.csv"), "f")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    for dir_f in f.chunks(5) {
        assert!(dir_f.windows(2).all(|w| w[1] > w[0]), "{dir_f:?}");
    }
}

#[test]
fn sde_run_fits_positive_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = vb(&[
        "train-sde",
        "--potential",
        "lora-log",
        "--s",
        "1e-3",
        "--steps",
        "20000",
        "--chains",
        "32",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("decay_fit.json")).unwrap())
            .unwrap();
    assert!(fit["lambda_hat"].as_f64().unwrap() > 0.0);
    assert_eq!(
        fs::read_to_string(dir.path().join("trajectory.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
        "step,time_s,v,grad_norm,t_norm"
    );
}

#[test]
fn generated_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.bin");
    let out = vb(&[
        "darcy",
        "gen",
        "--grid",
        "16",
        "--n",
        "240",
        "--seed",
        "1",
        "--out",
        p(&file),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let bytes = fs::read(&file).unwrap();
    assert_eq!(&bytes[..4], b"DRCY");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 240);
    assert_eq!(bytes.len(), 16 + 240 * 2 * 256 * 8);
    assert_eq!(
        read_dataset(&file).unwrap(),
        gen_dataset(16, 240, 1).unwrap()
    );
    let side = read_sidecar(&file).unwrap();
    assert_eq!(
        (side.grid, side.count, side.n_train, side.seed),
        (16, 240, 200, 1)
    );
}

#[test]
fn darcy_phases_write_six_column_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let (run1, run2, ev) = (
        dir.path().join("run1"),
        dir.path().join("run2"),
        dir.path().join("eval"),
    );
    assert_eq!(
        code(&vb(&[
            "darcy",
            "gen",
            "--grid",
            "8",
            "--n",
            "24",
            "--out",
            p(&data)
        ])),
        0
    );
    let out = vb(&[
        "darcy",
        "train",
        "--phase",
        "1",
        "--preset",
        "tiny",
        "--data",
        p(&data),
        "--out",
        p(&run1),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let ck = run1.join("checkpoint.bin");
    assert_eq!(
        code(&vb(&[
            "darcy",
            "train",
            "--phase",
            "2",
            "--preset",
            "tiny",
            "--data",
            p(&data)
        ])),
        2
    );
    let out = vb(&[
        "darcy",
        "train",
        "--phase",
        "2",
        "--preset",
        "tiny",
        "--reg",
        "power",
        "--lambda",
        "1e-4",
        "--eps",
        "1e-6",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ck),
        "--out",
        p(&run2),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = fs::read_to_string(run2.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_rmse,test_rmse,rel_l2,qk_norm_sq,gen_gap"
    );
    assert!(lines.all(|l| l.split(',').count() == 6));
    let out = vb(&[
        "darcy",
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&run2.join("model.bin")),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let last = text.lines().last().unwrap().to_string();
    let eval = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().nth(1).unwrap(), last);
    // Dimensions conflicting with the checkpoint are rejected.
    let out = vb(&[
        "darcy",
        "train",
        "--phase",
        "2",
        "--preset",
        "tiny",
        "--d",
        "8",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ck),
    ]);
    assert_eq!(code(&out), 2);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn rerun_from_embedded_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = vb(&[
        "--seed",
        "5",
        "train-sde",
        "--potential",
        "att-power",
        "--steps",
        "2000",
        "--chains",
        "4",
        "--out",
        p(&a),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let out = vb(&[
        "--config",
        p(&a.join("config.json")),
        "train-sde",
        "--out",
        p(&b),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(files(&a), files(&b));
}
