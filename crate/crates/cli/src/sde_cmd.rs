//! `vb train-sde`

use anyhow::Result;
use serde::{Deserialize, Serialize};
use villani_core::probe::stream_rng;
use villani_core::sde::{
    estimate_v_star, fit_decay, run_sde_with, DecayFit, InitSampler, SdeConfig, Trajectory,
};

use crate::args::SdeArgs;
use crate::config::{echo, invalid, require_nonnegative, require_positive, set, usage, OutDir};
use crate::exec::{sub_seed, RayonExecutor};
use crate::models::{
    build_potential, Activation, AttentionSetup, LoraSetup, PenaltySetup, PotentialKind,
};
use crate::Outcome;

const CHAIN_TAG: u64 = 0x0000_6368_6169_6e73;
const VSTAR_TAG: u64 = 0x0076_7374_6172;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeRunConfig {
    pub potential: PotentialKind,
    pub s: f64,
    pub h: f64,
    pub steps: usize,
    pub chains: usize,
    /// Defaults to `steps / 200`.
    pub record_every: Option<usize>,
    pub init_std: f64,
    pub lambda: f64,
    pub eps: f64,
    pub v_star_restarts: usize,
    pub v_star_budget: usize,
    pub seed: u64,
    pub attention: AttentionSetup,
    pub lora: LoraSetup,
}

impl Default for SdeRunConfig {
    fn default() -> Self {
        Self {
            potential: PotentialKind::LoraLog,
            s: 1e-3,
            h: 1e-3,
            steps: 20_000,
            chains: 32,
            record_every: None,
            init_std: 1.0,
            lambda: 1e-2,
            eps: 1.0,
            v_star_restarts: 16,
            v_star_budget: 2000,
            seed: 0,
            attention: AttentionSetup {
                t: 2,
                d: 2,
                r: 1,
                n: 8,
                data_scale: 1.0,
                beta: 1.0,
            },
            lora: LoraSetup {
                p: 2,
                d: 2,
                r: 2,
                n: 8,
                data_scale: 1.0,
                activation: Activation::Tanh,
                outer: None,
            },
        }
    }
}

impl SdeRunConfig {
    pub fn apply(&mut self, args: &SdeArgs, seed: Option<u64>) {
        set(&mut self.potential, args.potential);
        set(&mut self.s, args.s);
        set(&mut self.h, args.h);
        set(&mut self.steps, args.steps);
        set(&mut self.chains, args.chains);
        if args.record_every.is_some() {
            self.record_every = args.record_every;
        }
        set(&mut self.lambda, args.lambda);
        set(&mut self.eps, args.eps);
        set(&mut self.init_std, args.init_std);
        set(&mut self.lora.activation, args.activation);
        set(&mut self.seed, seed);
    }

    pub fn sde_config(&self) -> Result<SdeConfig> {
        require_nonnegative("s", self.s)?;
        require_positive("h", self.h)?;
        require_nonnegative("init_std", self.init_std)?;
        if self.steps == 0 || self.chains == 0 {
            return Err(usage("steps and chains must be at least 1"));
        }
        let record_every = self.record_every.unwrap_or((self.steps / 200).max(1));
        let cfg = SdeConfig {
            s: self.s,
            h: self.h,
            steps: self.steps,
            seed: sub_seed(self.seed, CHAIN_TAG),
            record_every,
            n_chains: self.chains,
        };
        cfg.validate().map_err(invalid)?;
        Ok(cfg)
    }
}

/// Trajectory CSV line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryCsvRow {
    pub step: usize,
    pub time_s: f64,
    pub v: f64,
    pub grad_norm: f64,
    pub t_norm: f64,
}

/// The decay-fit record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFitRecord {
    pub lambda_hat: f64,
    pub asymptote_hat: f64,
    pub r2: f64,
}

pub struct SdeOutcome {
    pub trajectory: Trajectory,
    /// `min(estimated inf V, smallest recorded V̄)`.
    pub v_star: f64,
    pub fit: villani_core::Result<DecayFit>,
}

impl SdeOutcome {
    pub fn passed(&self) -> bool {
        self.trajectory.divergence.is_none() && matches!(&self.fit, Ok(f) if f.lambda_hat > 0.0)
    }
}

pub fn simulate(cfg: &SdeRunConfig) -> Result<SdeOutcome> {
    let sde = cfg.sde_config()?;
    let pot = build_potential(
        cfg.potential,
        PenaltySetup {
            lambda: cfg.lambda,
            eps: cfg.eps,
        },
        &cfg.attention,
        &cfg.lora,
        cfg.seed,
    )?;
    let pot = pot.as_dyn();
    let init = InitSampler::Gaussian {
        mean: vec![0.0; pot.dim()],
        std: cfg.init_std,
    };
    let trajectory = run_sde_with(pot, &init, &sde, &RayonExecutor)?;
    let mut rng = stream_rng(sub_seed(cfg.seed, VSTAR_TAG), 0);
    let estimate =
        estimate_v_star(pot, cfg.v_star_restarts, cfg.v_star_budget, &mut rng).map_err(invalid)?;
    let values = trajectory.values();
    let v_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let v_star = estimate.min(v_min);
    let fit = fit_decay(&trajectory.times(), &values, v_star);
    Ok(SdeOutcome {
        trajectory,
        v_star,
        fit,
    })
}

pub fn csv_rows(tr: &Trajectory) -> Vec<TrajectoryCsvRow> {
    tr.rows
        .iter()
        .map(|r| TrajectoryCsvRow {
            step: r.step,
            time_s: r.time_s,
            v: r.v,
            grad_norm: r.grad_norm,
            t_norm: r.t_norm,
        })
        .collect()
}

pub fn run(cfg: &SdeRunConfig, out: &OutDir) -> Result<Outcome> {
    echo(cfg)?;
    let outcome = simulate(cfg)?;
    let tr = &outcome.trajectory;
    out.write_json("config.json", cfg)?;
    out.write_csv("trajectory.csv", &csv_rows(tr))?;
    if tr.halvings > 0 {
        println!("step size halved {} times, h = {}", tr.halvings, tr.h);
    }
    if tr.stability_warning {
        println!(
            "warning: averaged V rose over {} consecutive records",
            villani_core::sde::STABILITY_WINDOW
        );
    }
    if let Some(e) = &tr.divergence {
        println!(
            "diverged: {e}; trajectory truncated after {} rows",
            tr.rows.len()
        );
    }
    println!("v_star {}", outcome.v_star);
    match &outcome.fit {
        Ok(fit) => {
            let rec = DecayFitRecord {
                lambda_hat: fit.lambda_hat,
                asymptote_hat: fit.asymptote_hat,
                r2: fit.r2,
            };
            out.write_json("decay_fit.json", &rec)?;
            println!(
                "lambda_hat {} asymptote_hat {} r2 {}",
                rec.lambda_hat, rec.asymptote_hat, rec.r2
            );
        }
        Err(e) => println!("decay fit failed: {e}"),
    }
    let passed = outcome.passed();
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(if passed {
        Outcome::Pass
    } else {
        Outcome::Failed
    })
}
