use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::models::{Activation, PotentialKind};

#[derive(Debug, Parser)]
#[command(
    name = "vb",
    version,
    about = "Gradient checks, Villani probes, Langevin runs and the Darcy benchmark"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core). `--threads 1` is the bit-exact path.
    #[arg(long, global = true, env = "VB_THREADS")]
    pub threads: Option<usize>,
    /// Output directory, or the dataset file for `darcy gen`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients and Laplacians with finite differences.
    CheckGrads(CheckGradsArgs),
    /// Scan the Villani functional along random rays.
    ProbeVillani(ProbeArgs),
    /// Run Euler-Maruyama chains and fit the decay of the averaged risk.
    TrainSde(SdeArgs),
    /// Darcy-flow data, training and evaluation.
    #[command(subcommand)]
    Darcy(DarcyCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CheckModel {
    Attention,
    Lora,
    Darcy,
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    #[arg(long)]
    pub model: Option<CheckModel>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub potential: Option<PotentialKind>,
    /// Temperature.
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Comma-separated radii.
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    #[arg(long)]
    pub dirs: Option<usize>,
    #[arg(long)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Args)]
pub struct SdeArgs {
    #[arg(long)]
    pub potential: Option<PotentialKind>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub record_every: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Standard deviation of the Gaussian initial law.
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Subcommand)]
pub enum DarcyCommand {
    /// Generate a dataset file and its JSON sidecar.
    Gen(DarcyGenArgs),
    /// Run phase 1 (full training) or phase 2 (query/key retraining).
    Train(DarcyTrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(DarcyEvalArgs),
}

#[derive(Debug, Args)]
pub struct DarcyGenArgs {
    #[arg(long)]
    pub grid: Option<usize>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Leading samples that form the training split (default 5/6 of n).
    #[arg(long)]
    pub n_train: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    Desk,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RegChoice {
    None,
    Log,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Encoder {
    Linear,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgld,
}

#[derive(Debug, Args)]
pub struct DarcyTrainArgs {
    #[arg(long)]
    pub phase: Option<u8>,
    /// Dataset file written by `darcy gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Phase-1 checkpoint (required for phase 2).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from a preset before applying the other flags.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub reg: Option<RegChoice>,
    /// Penalty weight of the selected `--reg`.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Epochs of the selected phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub encoder: Option<Encoder>,
    #[arg(long)]
    pub optimizer: Option<OptimizerChoice>,
    /// Temperature of the SGLD phase-2 optimizer.
    #[arg(long)]
    pub sgld_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DarcyEvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}
