//! Command-line front end of the villani workspace: argument parsing, config
//! files, binary formats and parallel drivers around `villani-core`.

pub mod args;
pub mod checks;
pub mod config;
pub mod darcy_cmd;
pub mod exec;
pub mod formats;
pub mod models;
pub mod probe_cmd;
pub mod sde_cmd;

use std::path::PathBuf;

use anyhow::Result;

use args::{Cli, Command, DarcyCommand};
use config::{load, OutDir, UsageError};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    /// The command's check did not hold (exit code 1).
    Failed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let threads = cli.global.threads.unwrap_or(0);
    exec::with_pool(threads, move || dispatch(cli))?
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let g = cli.global;
    let cfg_path = g.config.as_deref();
    match cli.command {
        Command::CheckGrads(a) => {
            let mut cfg: checks::CheckGradsConfig = load(cfg_path)?;
            cfg.apply(&a, g.seed);
            let out = OutDir::create(g.out.as_deref())?;
            checks::run(&cfg, &out)
        }
        Command::ProbeVillani(a) => {
            let mut cfg: probe_cmd::ProbeConfig = load(cfg_path)?;
            cfg.apply(&a, g.seed);
            let out = OutDir::create(g.out.as_deref())?;
            probe_cmd::run(&cfg, &out)
        }
        Command::TrainSde(a) => {
            let mut cfg: sde_cmd::SdeRunConfig = load(cfg_path)?;
            cfg.apply(&a, g.seed);
            let out = OutDir::create(g.out.as_deref())?;
            sde_cmd::run(&cfg, &out)
        }
        Command::Darcy(DarcyCommand::Gen(a)) => {
            let mut cfg: darcy_cmd::DarcyGenConfig = load(cfg_path)?;
            cfg.apply(&a, g.seed);
            let path = g.out.unwrap_or_else(|| PathBuf::from("darcy.bin"));
            darcy_cmd::run_gen(&cfg, &path)
        }
        Command::Darcy(DarcyCommand::Train(a)) => {
            let mut cfg: darcy_cmd::DarcyTrainConfig = load(cfg_path)?;
            cfg.apply(&a, g.seed)?;
            let out = OutDir::create(g.out.as_deref())?;
            darcy_cmd::run_train(&mut cfg, Some(&a), &out)
        }
        Command::Darcy(DarcyCommand::Eval(a)) => {
            let mut cfg: darcy_cmd::DarcyEvalConfig = load(cfg_path)?;
            cfg.apply(&a);
            let out = OutDir::create(g.out.as_deref())?;
            darcy_cmd::run_eval(&cfg, &out)
        }
    }
}

/// 0 pass, 1 failed check or runtime error, 2 usage error.
pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Failed) => 1,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => 2,
        Err(_) => 1,
    }
}
