//! `vb darcy gen | train | eval`

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use villani_core::darcy::{
    compute_metrics, gen_darcy, run_phase1, run_phase2, standardize, Checkpoint, DarcyField,
    DarcyModel, EncoderKind, Layout, MetricsRow, NormStats, ParamGroup, Phase2Optimizer,
    Phase2Variant, PhaseConfig, ProtocolConfig, Split,
};
use villani_core::probe::stream_rng;

use crate::args::{
    DarcyEvalArgs, DarcyGenArgs, DarcyTrainArgs, Encoder, OptimizerChoice, Preset, RegChoice,
};
use crate::config::{echo, invalid, set, usage, write_json, OutDir};
use crate::formats::{
    group_name, read_checkpoint, read_dataset, read_sidecar, sidecar_path, write_checkpoint,
    write_dataset, DatasetSidecar, StatsRecord, Tensor, DATASET_VERSION,
};
use crate::Outcome;

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcyGenConfig {
    pub grid: usize,
    pub count: usize,
    /// Defaults to 5/6 of `count`.
    pub n_train: Option<usize>,
    pub seed: u64,
}

impl Default for DarcyGenConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            count: 240,
            n_train: None,
            seed: 0,
        }
    }
}

impl DarcyGenConfig {
    pub fn apply(&mut self, args: &DarcyGenArgs, seed: Option<u64>) {
        set(&mut self.grid, args.grid);
        set(&mut self.count, args.n);
        if args.n_train.is_some() {
            self.n_train = args.n_train;
        }
        set(&mut self.seed, seed);
    }

    pub fn train_count(&self) -> usize {
        self.n_train.unwrap_or(self.count * 5 / 6)
    }
}

/// Sample `i` comes from stream `i` of the seed, so the result matches
/// `gen_dataset` whatever the thread count.
pub fn generate(cfg: &DarcyGenConfig) -> Result<(Vec<DarcyField>, NormStats)> {
    if cfg.grid < 8 {
        return Err(usage(format!("grid must be at least 8, got {}", cfg.grid)));
    }
    let n_train = cfg.train_count();
    if n_train == 0 || n_train >= cfg.count {
        return Err(usage(format!(
            "need 0 < n_train < n, got n_train {n_train} with n {}",
            cfg.count
        )));
    }
    let fields = (0..cfg.count)
        .into_par_iter()
        .map(|i| gen_darcy(cfg.grid, &mut stream_rng(cfg.seed, i as u64)))
        .collect::<villani_core::Result<Vec<_>>>()?;
    let stats = NormStats::fit(&fields[..n_train])?;
    Ok((fields, stats))
}

pub fn run_gen(cfg: &DarcyGenConfig, path: &Path) -> Result<Outcome> {
    echo(cfg)?;
    let (fields, stats) = generate(cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_dataset(path, &fields)?;
    let sidecar = DatasetSidecar {
        format: "DRCY".into(),
        version: DATASET_VERSION,
        grid: cfg.grid,
        count: cfg.count,
        n_train: cfg.train_count(),
        seed: cfg.seed,
        stats: stats.into(),
        config: serde_json::to_value(cfg)?,
    };
    write_json(&sidecar_path(path), &sidecar)?;
    println!(
        "wrote {} samples ({} train) of grid {} to {}",
        cfg.count,
        cfg.train_count(),
        cfg.grid,
        path.display()
    );
    Ok(Outcome::Pass)
}

// ---------------------------------------------------------------------------
// protocol settings

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl From<PhaseConfig> for PhaseSettings {
    fn from(p: PhaseConfig) -> Self {
        Self {
            epochs: p.epochs,
            lr: p.lr,
            batch: p.batch,
        }
    }
}

impl From<PhaseSettings> for PhaseConfig {
    fn from(p: PhaseSettings) -> Self {
        Self {
            epochs: p.epochs,
            lr: p.lr,
            batch: p.batch,
        }
    }
}

/// The model and optimization part of the protocol; grid and split sizes
/// come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSettings {
    pub patch: usize,
    pub d: usize,
    pub r: usize,
    pub encoder: Encoder,
    pub phase1: PhaseSettings,
    pub phase2: PhaseSettings,
    pub lambda_log: f64,
    pub lambda_power: f64,
    pub epsilon: f64,
    pub optimizer: OptimizerChoice,
    pub sgld_s: f64,
}

impl ProtocolSettings {
    pub fn preset(p: Preset) -> Self {
        let c = match p {
            Preset::Full => ProtocolConfig::full(),
            Preset::Desk => ProtocolConfig::desk(),
            Preset::Tiny => ProtocolConfig::tiny(),
        };
        Self {
            patch: c.patch,
            d: c.d,
            r: c.r,
            encoder: match c.encoder {
                EncoderKind::Linear => Encoder::Linear,
                EncoderKind::Conv => Encoder::Conv,
            },
            phase1: c.phase1.into(),
            phase2: c.phase2.into(),
            lambda_log: c.lambda_log,
            lambda_power: c.lambda_power,
            epsilon: c.epsilon,
            optimizer: OptimizerChoice::Adam,
            sgld_s: 0.0,
        }
    }

    pub fn protocol(
        &self,
        grid: usize,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> ProtocolConfig {
        ProtocolConfig {
            grid,
            patch: self.patch,
            d: self.d,
            r: self.r,
            n_train,
            n_test,
            encoder: match self.encoder {
                Encoder::Linear => EncoderKind::Linear,
                Encoder::Conv => EncoderKind::Conv,
            },
            phase1: self.phase1.into(),
            phase2: self.phase2.into(),
            lambda_log: self.lambda_log,
            lambda_power: self.lambda_power,
            epsilon: self.epsilon,
            phase2_optimizer: match self.optimizer {
                OptimizerChoice::Adam => Phase2Optimizer::Adam,
                OptimizerChoice::Sgld => Phase2Optimizer::Sgld { s: self.sgld_s },
            },
            seed,
        }
    }
}

fn variant(reg: RegChoice) -> Phase2Variant {
    match reg {
        RegChoice::None => Phase2Variant::None,
        RegChoice::Log => Phase2Variant::Log,
        RegChoice::Power => Phase2Variant::Power,
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcyTrainConfig {
    pub phase: u8,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reg: RegChoice,
    pub seed: u64,
    pub protocol: ProtocolSettings,
}

impl Default for DarcyTrainConfig {
    fn default() -> Self {
        Self {
            phase: 1,
            data: None,
            checkpoint: None,
            reg: RegChoice::None,
            seed: 0,
            protocol: ProtocolSettings::preset(Preset::Desk),
        }
    }
}

impl DarcyTrainConfig {
    pub fn apply(&mut self, args: &DarcyTrainArgs, seed: Option<u64>) -> Result<()> {
        if let Some(p) = args.preset {
            self.protocol = ProtocolSettings::preset(p);
        }
        set(&mut self.phase, args.phase);
        if args.data.is_some() {
            self.data.clone_from(&args.data);
        }
        if args.checkpoint.is_some() {
            self.checkpoint.clone_from(&args.checkpoint);
        }
        set(&mut self.reg, args.reg);
        set(&mut self.seed, seed);
        let pr = &mut self.protocol;
        set(&mut pr.patch, args.patch);
        set(&mut pr.d, args.d);
        set(&mut pr.r, args.r);
        set(&mut pr.encoder, args.encoder);
        let phase = if self.phase == 2 {
            &mut pr.phase2
        } else {
            &mut pr.phase1
        };
        set(&mut phase.epochs, args.epochs);
        set(&mut phase.lr, args.lr);
        set(&mut phase.batch, args.batch);
        if let Some(l) = args.lambda {
            match self.reg {
                RegChoice::None => return Err(usage("--lambda needs --reg log or --reg power")),
                RegChoice::Log => pr.lambda_log = l,
                RegChoice::Power => pr.lambda_power = l,
            }
        }
        set(&mut pr.epsilon, args.eps);
        set(&mut pr.optimizer, args.optimizer);
        set(&mut pr.sgld_s, args.sgld_s);
        Ok(())
    }
}

/// Loaded dataset split by its sidecar.
pub struct Dataset {
    pub sidecar: DatasetSidecar,
    pub stats: NormStats,
    pub train: Split,
    pub test: Split,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let sidecar = read_sidecar(path)?;
    let fields = read_dataset(path)?;
    if fields.len() != sidecar.count || fields.first().map(|f| f.n) != Some(sidecar.grid) {
        return Err(usage(format!(
            "{} does not match its sidecar",
            path.display()
        )));
    }
    if sidecar.n_train == 0 || sidecar.n_train >= fields.len() {
        return Err(usage("sidecar split leaves an empty train or test set"));
    }
    let stats: NormStats = sidecar.stats.into();
    let (tr, te) = fields.split_at(sidecar.n_train);
    Ok(Dataset {
        train: standardize(tr, &stats),
        test: standardize(te, &stats),
        stats,
        sidecar,
    })
}

/// Header stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub phase: u8,
    pub grid: usize,
    pub seed: u64,
    pub reg: RegChoice,
    pub protocol: ProtocolSettings,
    pub stats: StatsRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsCsvRow {
    pub epoch: usize,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub rel_l2: f64,
    pub qk_norm_sq: f64,
    pub gen_gap: f64,
}

impl From<MetricsRow> for MetricsCsvRow {
    fn from(m: MetricsRow) -> Self {
        Self {
            epoch: m.epoch,
            train_rmse: m.train_rmse,
            test_rmse: m.test_rmse,
            rel_l2: m.rel_l2,
            qk_norm_sq: m.qk_norm_sq,
            gen_gap: m.gen_gap,
        }
    }
}

fn tensors_of(ck: &Checkpoint) -> Vec<Tensor> {
    let model = &ck.model;
    let mut out: Vec<Tensor> = model
        .layout
        .groups()
        .map(|g| {
            let (rows, cols) = model.layout.shape(g);
            Tensor {
                name: group_name(g).into(),
                rows,
                cols,
                data: model.group_slice(g).to_vec(),
            }
        })
        .collect();
    let (rows, cols) = model.layout.shape(ParamGroup::Wq);
    for (name, data) in [("init_w_q", &ck.init_wq), ("init_w_k", &ck.init_wk)] {
        out.push(Tensor {
            name: name.into(),
            rows,
            cols,
            data: data.clone(),
        });
    }
    out
}

fn take_tensor(tensors: &[Tensor], name: &str, shape: (usize, usize)) -> Result<Vec<f64>> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| usage(format!("checkpoint lacks tensor {name}")))?;
    if (t.rows, t.cols) != shape {
        return Err(usage(format!(
            "checkpoint tensor {name} is {}x{}, model expects {}x{}",
            t.rows, t.cols, shape.0, shape.1
        )));
    }
    Ok(t.data.clone())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Checkpoint)> {
    let (header, tensors) = read_checkpoint(path)?;
    let header: CheckpointHeader =
        serde_json::from_value(header).map_err(|e| usage(format!("bad checkpoint header: {e}")))?;
    let dims = header
        .protocol
        .protocol(header.grid, 1, 1, header.seed)
        .dims();
    let layout = Layout::new(dims).map_err(invalid)?;
    let mut params = vec![0.0; layout.len()];
    for g in layout.groups() {
        let data = take_tensor(&tensors, group_name(g), layout.shape(g))?;
        params[layout.range(g)].copy_from_slice(&data);
    }
    let qk_shape = layout.shape(ParamGroup::Wq);
    let init_wq = take_tensor(&tensors, "init_w_q", qk_shape)?;
    let init_wk = take_tensor(&tensors, "init_w_k", qk_shape)?;
    Ok((
        header,
        Checkpoint {
            model: DarcyModel { layout, params },
            init_wq,
            init_wk,
        },
    ))
}

fn print_metrics(rows: &[MetricsRow]) {
    if let Some(m) = rows.last() {
        println!(
            "epoch {} train_rmse {:.6e} test_rmse {:.6e} rel_l2 {:.6e} qk_norm_sq {:.6e} gen_gap {:.6e}",
            m.epoch, m.train_rmse, m.test_rmse, m.rel_l2, m.qk_norm_sq, m.gen_gap
        );
    }
}

fn csv_rows(rows: &[MetricsRow]) -> Vec<MetricsCsvRow> {
    rows.iter().copied().map(Into::into).collect()
}

pub fn run_train(
    cfg: &mut DarcyTrainConfig,
    args: Option<&DarcyTrainArgs>,
    out: &OutDir,
) -> Result<Outcome> {
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| usage("--data is required"))?;
    let ds = load_dataset(&data)?;
    match cfg.phase {
        1 => {
            let protocol =
                cfg.protocol
                    .protocol(ds.sidecar.grid, ds.train.len(), ds.test.len(), cfg.seed);
            protocol.validate().map_err(invalid)?;
            echo(cfg)?;
            out.write_json("config.json", cfg)?;
            let result = run_phase1(&protocol, &ds.train, &ds.test, &ds.stats)?;
            print_metrics(&result.metrics);
            out.write_csv("metrics.csv", &csv_rows(&result.metrics))?;
            if let Some(p) = out.path("checkpoint.bin") {
                let header = CheckpointHeader {
                    phase: 1,
                    grid: ds.sidecar.grid,
                    seed: cfg.seed,
                    reg: RegChoice::None,
                    protocol: cfg.protocol.clone(),
                    stats: ds.sidecar.stats,
                };
                write_checkpoint(&p, &header, &tensors_of(&result.result))?;
            }
            Ok(Outcome::Pass)
        }
        2 => {
            let ck_path = cfg
                .checkpoint
                .clone()
                .ok_or_else(|| usage("phase 2 needs --checkpoint"))?;
            let (header, ck) = load_checkpoint(&ck_path)?;
            if header.grid != ds.sidecar.grid {
                return Err(usage("checkpoint grid does not match the dataset"));
            }
            // Model shape comes from the checkpoint; conflicting flags are an error.
            let h = &header.protocol;
            if let Some(a) = args {
                let clash = a.patch.is_some_and(|v| v != h.patch)
                    || a.d.is_some_and(|v| v != h.d)
                    || a.r.is_some_and(|v| v != h.r)
                    || a.encoder.is_some_and(|v| v != h.encoder);
                if clash {
                    return Err(usage("model dimensions conflict with the checkpoint"));
                }
            }
            cfg.protocol.patch = h.patch;
            cfg.protocol.d = h.d;
            cfg.protocol.r = h.r;
            cfg.protocol.encoder = h.encoder;
            let protocol =
                cfg.protocol
                    .protocol(ds.sidecar.grid, ds.train.len(), ds.test.len(), cfg.seed);
            protocol.validate().map_err(invalid)?;
            let reg = protocol.regularizer(variant(cfg.reg)).map_err(invalid)?;
            echo(cfg)?;
            out.write_json("config.json", cfg)?;
            let result = run_phase2(&ck, &protocol, &reg, &ds.train, &ds.test, &ds.stats)?;
            print_metrics(&result.metrics);
            out.write_csv("metrics.csv", &csv_rows(&result.metrics))?;
            if let Some(p) = out.path("model.bin") {
                let header = CheckpointHeader {
                    phase: 2,
                    grid: ds.sidecar.grid,
                    seed: cfg.seed,
                    reg: cfg.reg,
                    protocol: cfg.protocol.clone(),
                    stats: ds.sidecar.stats,
                };
                let done = Checkpoint {
                    model: result.result,
                    ..ck
                };
                write_checkpoint(&p, &header, &tensors_of(&done))?;
            }
            Ok(Outcome::Pass)
        }
        p => Err(usage(format!("phase must be 1 or 2, got {p}"))),
    }
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcyEvalConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl DarcyEvalConfig {
    pub fn apply(&mut self, args: &DarcyEvalArgs) {
        if args.data.is_some() {
            self.data.clone_from(&args.data);
        }
        if args.checkpoint.is_some() {
            self.checkpoint.clone_from(&args.checkpoint);
        }
    }
}

pub fn run_eval(cfg: &DarcyEvalConfig, out: &OutDir) -> Result<Outcome> {
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| usage("--data is required"))?;
    let ck_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let ds = load_dataset(&data)?;
    let (header, ck) = load_checkpoint(&ck_path)?;
    if header.grid != ds.sidecar.grid {
        return Err(usage("checkpoint grid does not match the dataset"));
    }
    echo(cfg)?;
    out.write_json("config.json", cfg)?;
    let epochs = if header.phase == 2 {
        header.protocol.phase2.epochs
    } else {
        header.protocol.phase1.epochs
    };
    let row = compute_metrics(&ck.model, epochs, &ds.train, &ds.test, &ds.stats)?;
    print_metrics(&[row]);
    out.write_csv("eval.csv", &[MetricsCsvRow::from(row)])?;
    Ok(Outcome::Pass)
}
