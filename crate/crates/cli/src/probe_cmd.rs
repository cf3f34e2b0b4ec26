//! `vb probe-villani`

use anyhow::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use villani_core::probe::{random_direction, ray_scan, stream_rng, RayScanReport, DEFAULT_RADII};

use crate::args::ProbeArgs;
use crate::config::{echo, invalid, require_positive, set, usage, OutDir};
use crate::exec::sub_seed;
use crate::models::{
    build_potential, Activation, AttentionSetup, BuiltPotential, LoraSetup, PenaltySetup,
    PotentialKind,
};
use crate::Outcome;

const DIRECTION_TAG: u64 = 0x7261_7973;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub potential: PotentialKind,
    pub s: f64,
    pub lambda: f64,
    pub eps: f64,
    pub radii: Vec<f64>,
    pub dirs: usize,
    pub seed: u64,
    pub attention: AttentionSetup,
    pub lora: LoraSetup,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            potential: PotentialKind::LoraLog,
            s: 0.1,
            lambda: 1e-3,
            eps: 1.0,
            radii: DEFAULT_RADII.to_vec(),
            dirs: 16,
            seed: 0,
            attention: AttentionSetup {
                t: 2,
                d: 1,
                r: 1,
                n: 4,
                data_scale: 0.01,
                beta: 1.0,
            },
            lora: LoraSetup {
                p: 1,
                d: 1,
                r: 1,
                n: 4,
                data_scale: 0.01,
                activation: Activation::Tanh,
                outer: Some(vec![1.0]),
            },
        }
    }
}

impl ProbeConfig {
    pub fn apply(&mut self, args: &ProbeArgs, seed: Option<u64>) {
        set(&mut self.potential, args.potential);
        set(&mut self.s, args.s);
        set(&mut self.lambda, args.lambda);
        set(&mut self.eps, args.eps);
        set(&mut self.radii, args.radii.clone());
        set(&mut self.dirs, args.dirs);
        set(&mut self.lora.activation, args.activation);
        set(&mut self.seed, seed);
    }
}

/// One line of the probe CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub potential: &'static str,
    pub direction: usize,
    pub radius: f64,
    pub f: f64,
    pub v: f64,
    pub laplacian_stderr: f64,
    pub overflow: bool,
}

pub struct ProbeOutcome {
    pub reports: Vec<RayScanReport>,
    /// Regularizer inactive on a LoRA potential: the scaling orbit is not
    /// confined and no scan can certify growth.
    pub non_confining: bool,
}

impl ProbeOutcome {
    /// `F` strictly increasing over the radii and positive at the top two.
    pub fn direction_passes(report: &RayScanReport) -> bool {
        report.villani_strictly_increasing()
            && report.villani_positive_tail(2.min(report.radii.len()))
    }

    pub fn passed_directions(&self) -> usize {
        self.reports
            .iter()
            .filter(|r| Self::direction_passes(r))
            .count()
    }

    pub fn passed(&self) -> bool {
        !self.non_confining && self.passed_directions() == self.reports.len()
    }
}

/// Scans `cfg.dirs` random directions; direction `i` comes from stream `i`
/// of a seed derived from `cfg.seed`.
pub fn probe(cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    require_positive("s", cfg.s)?;
    if cfg.dirs == 0 {
        return Err(usage("dirs must be at least 1"));
    }
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
    let non_confining = match &pot {
        BuiltPotential::Lora(p) => p.has_non_confining_orbit(),
        BuiltPotential::Attention(_) => false,
    };
    let dim = pot.as_dyn().dim();
    let dir_seed = sub_seed(cfg.seed, DIRECTION_TAG);
    let reports = (0..cfg.dirs)
        .into_par_iter()
        .map(|i| {
            let u = random_direction(dim, &mut stream_rng(dir_seed, i as u64));
            ray_scan(pot.as_dyn(), &u, &cfg.radii, cfg.s)
        })
        .collect::<villani_core::Result<Vec<_>>>()
        .map_err(invalid)?;
    Ok(ProbeOutcome {
        reports,
        non_confining,
    })
}

pub fn rows(kind: PotentialKind, outcome: &ProbeOutcome) -> Vec<ProbeRow> {
    let mut rows = Vec::new();
    for (k, rep) in outcome.reports.iter().enumerate() {
        for i in 0..rep.radii.len() {
            rows.push(ProbeRow {
                potential: kind.name(),
                direction: k,
                radius: rep.radii[i],
                f: rep.villani_values[i],
                v: rep.confining_values[i],
                laplacian_stderr: rep.laplacian_stderr[i],
                overflow: rep.overflow[i],
            });
        }
    }
    rows
}

pub fn run(cfg: &ProbeConfig, out: &OutDir) -> Result<Outcome> {
    echo(cfg)?;
    let outcome = probe(cfg)?;
    out.write_json("config.json", cfg)?;
    out.write_csv("probe.csv", &rows(cfg.potential, &outcome))?;
    for (k, rep) in outcome.reports.iter().enumerate() {
        if !ProbeOutcome::direction_passes(rep) {
            println!("direction {k}: F = {:?}", rep.villani_values);
        }
    }
    if outcome.non_confining {
        println!(
            "non-confining orbit detected: {} with an inactive regularizer is constant along (UA, VA^-T)",
            cfg.potential.name()
        );
    }
    let passed = outcome.passed();
    println!(
        "{}: {}/{} directions pass, {}",
        cfg.potential.name(),
        outcome.passed_directions(),
        outcome.reports.len(),
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(if passed {
        Outcome::Pass
    } else {
        Outcome::Failed
    })
}
