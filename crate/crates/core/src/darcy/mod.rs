//! Darcy-flow operator regression: synthetic data, standardization, the
//! patch-attention model, and the two-phase training protocol with its
//! metrics.

pub mod model;
pub mod solver;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{domain, usage, Result};
use crate::linalg::Matrix;
use crate::probe::stream_rng;
use crate::regularizers::{reg_grad_add, RegularizerSpec};
use crate::sde::{adam_step, em_step, AdamConfig, AdamState};

pub use model::{BackwardMode, DarcyModel, EncoderKind, Layout, ModelDims, ParamGroup};
pub use solver::{gen_darcy, solve_pressure, DarcyField};

// ---------------------------------------------------------------------------
// Patches

/// Splits an `n×n` row-major field into `(n/p)²` tokens of `p²` pixels.
/// Patches and the pixels inside them are both in row-major order.
pub fn patchify(field: &[f64], n: usize, p: usize) -> Result<Matrix> {
    if p == 0 || !n.is_multiple_of(p) {
        return Err(usage(format!("patch size {p} does not divide grid {n}")));
    }
    if field.len() != n * n {
        return Err(crate::error::shape(format!(
            "field has {} values, expected {}",
            field.len(),
            n * n
        )));
    }
    let side = n / p;
    Ok(Matrix::from_fn(side * side, p * p, |tok, pix| {
        let (pi, pj) = (tok / side, tok % side);
        let (ii, jj) = (pix / p, pix % p);
        field[(pi * p + ii) * n + pj * p + jj]
    }))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Matrix, n: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || !n.is_multiple_of(p) {
        return Err(usage(format!("patch size {p} does not divide grid {n}")));
    }
    let side = n / p;
    if tokens.shape() != (side * side, p * p) {
        return Err(crate::error::shape(format!(
            "tokens of shape {:?}, expected {:?}",
            tokens.shape(),
            (side * side, p * p)
        )));
    }
    let mut field = vec![0.0; n * n];
    for tok in 0..side * side {
        let (pi, pj) = (tok / side, tok % side);
        for pix in 0..p * p {
            let (ii, jj) = (pix / p, pix % p);
            field[(pi * p + ii) * n + pj * p + jj] = tokens[(tok, pix)];
        }
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Data

/// `count` samples; sample `i` draws from stream `i` of `seed`.
pub fn gen_dataset(n: usize, count: usize, seed: u64) -> Result<Vec<DarcyField>> {
    (0..count)
        .map(|i| gen_darcy(n, &mut stream_rng(seed, i as u64)))
        .collect()
}

/// Scalar mean and standard deviation of each field type over the training
/// set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub a_mean: f64,
    pub a_std: f64,
    pub u_mean: f64,
    pub u_std: f64,
}

impl NormStats {
    pub fn fit(train: &[DarcyField]) -> Result<Self> {
        if train.is_empty() {
            return Err(usage("cannot standardize an empty training set"));
        }
        let (a_mean, a_std) = mean_std(train.iter().flat_map(|f| f.a.iter().copied()));
        let (u_mean, u_std) = mean_std(train.iter().flat_map(|f| f.u.iter().copied()));
        if !(a_std > 0.0) || !(u_std > 0.0) {
            return Err(domain("training set has zero standard deviation"));
        }
        Ok(Self {
            a_mean,
            a_std,
            u_mean,
            u_std,
        })
    }

    pub fn normalize_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| (v - self.u_mean) / self.u_std).collect()
    }

    pub fn normalize_a(&self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|v| (v - self.a_mean) / self.a_std).collect()
    }

    pub fn denormalize_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| v * self.u_std + self.u_mean).collect()
    }

    pub fn denormalize_a(&self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|v| v * self.a_std + self.a_mean).collect()
    }
}

/// Population mean and standard deviation, two-pass.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, libm::sqrt(var))
}

/// Normalized inputs and targets of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub n: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Standardizes `fields` with `stats`.
pub fn standardize(fields: &[DarcyField], stats: &NormStats) -> Split {
    Split {
        n: fields.first().map(|f| f.n).unwrap_or(0),
        inputs: fields.iter().map(|f| stats.normalize_a(&f.a)).collect(),
        targets: fields.iter().map(|f| stats.normalize_u(&f.u)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase2Variant {
    None,
    Log,
    Power,
}

impl Phase2Variant {
    pub const ALL: [Phase2Variant; 3] = [
        Phase2Variant::None,
        Phase2Variant::Log,
        Phase2Variant::Power,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Phase2Variant::None => "none",
            Phase2Variant::Log => "log",
            Phase2Variant::Power => "power",
        }
    }
}

/// Phase-2 update rule. `Sgld` replaces Adam by Langevin steps
/// `T' = T − lr ∇V + √(s·lr) ξ` at temperature `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase2Optimizer {
    Adam,
    Sgld { s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub grid: usize,
    pub patch: usize,
    pub d: usize,
    pub r: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub encoder: EncoderKind,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub lambda_log: f64,
    pub lambda_power: f64,
    pub epsilon: f64,
    pub phase2_optimizer: Phase2Optimizer,
    pub seed: u64,
}

impl ProtocolConfig {
    /// 64×64 grid, 900/124 split, `d = r = 64`, 500 + 100 epochs.
    pub fn full() -> Self {
        Self {
            grid: 64,
            patch: 4,
            d: 64,
            r: 64,
            n_train: 900,
            n_test: 124,
            encoder: EncoderKind::Linear,
            phase1: PhaseConfig {
                epochs: 500,
                lr: 1e-3,
                batch: 32,
            },
            phase2: PhaseConfig {
                epochs: 100,
                lr: 1e-3,
                batch: 32,
            },
            lambda_log: 1e-5,
            lambda_power: 1e-4,
            epsilon: 1e-6,
            phase2_optimizer: Phase2Optimizer::Adam,
            seed: 0,
        }
    }

    /// 16×16 grid, 200/40 split, `d = r = 16`, 150 + 50 epochs.
    pub fn desk() -> Self {
        Self {
            grid: 16,
            patch: 4,
            d: 16,
            r: 16,
            n_train: 200,
            n_test: 40,
            phase1: PhaseConfig {
                epochs: 150,
                lr: 1e-3,
                batch: 16,
            },
            phase2: PhaseConfig {
                epochs: 50,
                lr: 1e-3,
                batch: 16,
            },
            ..Self::full()
        }
    }

    /// 8×8 grid with `d = r = 4`, for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        Self {
            grid: 8,
            patch: 4,
            d: 4,
            r: 4,
            n_train: 16,
            n_test: 8,
            phase1: PhaseConfig {
                epochs: 3,
                lr: 1e-3,
                batch: 4,
            },
            phase2: PhaseConfig {
                epochs: 2,
                lr: 1e-3,
                batch: 4,
            },
            ..Self::full()
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            grid: self.grid,
            patch: self.patch,
            d: self.d,
            r: self.r,
            encoder: self.encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Layout::new(self.dims())?;
        if self.grid < 8 {
            return Err(usage(format!("grid must be at least 8, got {}", self.grid)));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(usage("train and test splits must be non-empty"));
        }
        for ph in [self.phase1, self.phase2] {
            if ph.batch == 0 || !(ph.lr > 0.0 && ph.lr.is_finite()) {
                return Err(usage("batch must be positive and lr positive"));
            }
        }
        if !(self.epsilon > 0.0) || self.lambda_log < 0.0 || self.lambda_power < 0.0 {
            return Err(domain("need epsilon > 0 and nonnegative lambdas"));
        }
        if let Phase2Optimizer::Sgld { s } = self.phase2_optimizer {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(domain(format!(
                    "SGLD temperature must be nonnegative, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// The phase-2 penalty on `(W_Q, W_K)` for a variant.
    pub fn regularizer(&self, variant: Phase2Variant) -> Result<RegularizerSpec> {
        let dims = (self.d * self.r, self.d * self.r);
        match variant {
            Phase2Variant::None => Ok(RegularizerSpec::none(dims)),
            Phase2Variant::Log => RegularizerSpec::log_amplified(self.lambda_log, dims),
            Phase2Variant::Power => RegularizerSpec::power(self.lambda_power, self.epsilon, dims),
        }
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub rel_l2: f64,
    pub qk_norm_sq: f64,
    pub gen_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEval {
    /// Per-pixel mean squared error in normalized space.
    pub mse: f64,
    /// Mean over samples of `‖û − u‖₂ / ‖u‖₂`, in physical units.
    pub rel_l2: f64,
}

impl SplitEval {
    pub fn rmse(&self) -> f64 {
        libm::sqrt(self.mse)
    }
}

pub fn evaluate_split(model: &DarcyModel, split: &Split, stats: &NormStats) -> Result<SplitEval> {
    if split.is_empty() {
        return Err(usage("cannot evaluate an empty split"));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut rel = 0.0;
    for (x, y) in split.inputs.iter().zip(&split.targets) {
        let pred = model.predict(x)?;
        for (p, t) in pred.iter().zip(y) {
            sq += (p - t) * (p - t);
        }
        count += y.len();
        let pu = stats.denormalize_u(&pred);
        let tu = stats.denormalize_u(y);
        let num: f64 = pu.iter().zip(&tu).map(|(p, t)| (p - t) * (p - t)).sum();
        let den: f64 = tu.iter().map(|t| t * t).sum();
        rel += libm::sqrt(num) / libm::sqrt(den);
    }
    Ok(SplitEval {
        mse: sq / count as f64,
        rel_l2: rel / split.len() as f64,
    })
}

pub fn compute_metrics(
    model: &DarcyModel,
    epoch: usize,
    train: &Split,
    test: &Split,
    stats: &NormStats,
) -> Result<MetricsRow> {
    let tr = evaluate_split(model, train, stats)?;
    let te = evaluate_split(model, test, stats)?;
    Ok(MetricsRow {
        epoch,
        train_rmse: tr.rmse(),
        test_rmse: te.rmse(),
        rel_l2: te.rel_l2,
        qk_norm_sq: model.qk_norm_sq(),
        gen_gap: te.mse - tr.mse,
    })
}

/// Phase-1 result: the trained model plus the `(W_Q, W_K)` values it was
/// initialized with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DarcyModel,
    pub init_wq: Vec<f64>,
    pub init_wk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutput<T> {
    pub result: T,
    pub metrics: Vec<MetricsRow>,
}

/// RNG streams used by the protocol under the config seed.
const STREAM_INIT: u64 = 0;
const STREAM_PHASE1: u64 = 1;
const STREAM_PHASE2: u64 = 2;

fn check_split(split: &Split, n: usize) -> Result<()> {
    if split.is_empty() {
        return Err(usage("empty split"));
    }
    if split.n != n {
        return Err(usage(format!(
            "split grid {} does not match config grid {n}",
            split.n
        )));
    }
    Ok(())
}

/// One epoch of minibatch updates. `active` is the parameter range being
/// trained; `reg` (if any) acts on that same range.
#[allow(clippy::too_many_arguments)]
fn train_epoch<R: rand::Rng + ?Sized>(
    model: &mut DarcyModel,
    train: &Split,
    phase: &PhaseConfig,
    mode: BackwardMode,
    active: core::ops::Range<usize>,
    reg: Option<&RegularizerSpec>,
    optimizer: Phase2Optimizer,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<()> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let cfg = AdamConfig {
        lr: phase.lr,
        ..AdamConfig::default()
    };
    let mut grad = vec![0.0; model.params.len()];
    for batch in order.chunks(phase.batch) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let w = 1.0 / batch.len() as f64;
        for &i in batch {
            model.sample_loss_and_grad(&train.inputs[i], &train.targets[i], w, mode, &mut grad)?;
        }
        if let Some(spec) = reg {
            let point = model.params[active.clone()].to_vec();
            reg_grad_add(&point, spec, &mut grad[active.clone()]);
        }
        match optimizer {
            Phase2Optimizer::Adam => adam_step(
                &mut model.params[active.clone()],
                &grad[active.clone()],
                adam,
                &cfg,
            ),
            Phase2Optimizer::Sgld { s } => {
                let next = em_step(
                    &model.params[active.clone()],
                    &grad[active.clone()],
                    s,
                    phase.lr,
                    rng,
                )
                .map_err(|_| domain("training produced non-finite parameters"))?;
                model.params[active.clone()].copy_from_slice(&next);
            }
        }
        if model.params[active.clone()].iter().any(|v| !v.is_finite()) {
            return Err(domain("training produced non-finite parameters"));
        }
    }
    Ok(())
}

/// Trains every parameter with Adam on plain MSE.
pub fn run_phase1(
    config: &ProtocolConfig,
    train: &Split,
    test: &Split,
    stats: &NormStats,
) -> Result<PhaseOutput<Checkpoint>> {
    config.validate()?;
    check_split(train, config.grid)?;
    check_split(test, config.grid)?;
    let mut model = DarcyModel::init(config.dims(), &mut stream_rng(config.seed, STREAM_INIT))?;
    let init_wq = model.group_slice(ParamGroup::Wq).to_vec();
    let init_wk = model.group_slice(ParamGroup::Wk).to_vec();
    let mut rng = stream_rng(config.seed, STREAM_PHASE1);
    let mut adam = AdamState::new(model.params.len());
    let all = 0..model.params.len();
    let mut metrics = Vec::with_capacity(config.phase1.epochs);
    for epoch in 1..=config.phase1.epochs {
        train_epoch(
            &mut model,
            train,
            &config.phase1,
            BackwardMode::Full,
            all.clone(),
            None,
            Phase2Optimizer::Adam,
            &mut adam,
            &mut rng,
        )?;
        metrics.push(compute_metrics(&model, epoch, train, test, stats)?);
    }
    Ok(PhaseOutput {
        result: Checkpoint {
            model,
            init_wq,
            init_wk,
        },
        metrics,
    })
}

/// Resets `(W_Q, W_K)` to their phase-1 initial values, freezes everything
/// else, and trains the pair under `reg` with `config.phase2_optimizer`.
pub fn run_phase2(
    checkpoint: &Checkpoint,
    config: &ProtocolConfig,
    reg: &RegularizerSpec,
    train: &Split,
    test: &Split,
    stats: &NormStats,
) -> Result<PhaseOutput<DarcyModel>> {
    config.validate()?;
    if checkpoint.model.dims() != config.dims() {
        return Err(usage("checkpoint model does not match the protocol config"));
    }
    let qk = config.d * config.r;
    if checkpoint.init_wq.len() != qk
        || checkpoint.init_wk.len() != qk
        || reg.factor_dims != (qk, qk)
    {
        return Err(usage(
            "checkpoint or regularizer does not match (W_Q, W_K) sizes",
        ));
    }
    check_split(train, config.grid)?;
    check_split(test, config.grid)?;
    let mut model = checkpoint.model.clone();
    model
        .group_slice_mut(ParamGroup::Wq)
        .copy_from_slice(&checkpoint.init_wq);
    model
        .group_slice_mut(ParamGroup::Wk)
        .copy_from_slice(&checkpoint.init_wk);
    // W_Q and W_K are adjacent in every layout.
    let active = model.layout.range(ParamGroup::Wq).start..model.layout.range(ParamGroup::Wk).end;
    let mut rng = stream_rng(config.seed, STREAM_PHASE2);
    let mut adam = AdamState::new(active.len());
    let mut metrics = Vec::with_capacity(config.phase2.epochs);
    for epoch in 1..=config.phase2.epochs {
        train_epoch(
            &mut model,
            train,
            &config.phase2,
            BackwardMode::QueryKeyOnly,
            active.clone(),
            Some(reg),
            config.phase2_optimizer,
            &mut adam,
            &mut rng,
        )?;
        metrics.push(compute_metrics(&model, epoch, train, test, stats)?);
    }
    Ok(PhaseOutput {
        result: model,
        metrics,
    })
}
