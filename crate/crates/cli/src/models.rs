//! Small attention and LoRA potentials built from a seed, shared by the
//! probe and SDE commands.

use anyhow::Result;
use clap::ValueEnum;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use villani_core::attention::{AttnParams, AttnSample};
use villani_core::linalg::Matrix;
use villani_core::lora::{BoundedActivation, LoraParams, LoraSample};
use villani_core::probe::{stream_rng, AttentionPotential, LoraPotential, Potential};
use villani_core::regularizers::{RegularizerKind, RegularizerSpec};

use crate::config::{invalid, usage};

/// Stream of the master seed that draws the synthetic data.
pub const DATA_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialKind {
    AttNone,
    AttLog,
    AttPower,
    LoraNone,
    LoraLog,
    LoraPower,
}

impl PotentialKind {
    /// The four regularized potentials.
    pub const REGULARIZED: [PotentialKind; 4] = [
        PotentialKind::AttLog,
        PotentialKind::AttPower,
        PotentialKind::LoraLog,
        PotentialKind::LoraPower,
    ];

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            PotentialKind::AttNone | PotentialKind::AttLog | PotentialKind::AttPower
        )
    }

    pub fn regularizer_kind(self) -> RegularizerKind {
        match self {
            PotentialKind::AttNone | PotentialKind::LoraNone => RegularizerKind::None,
            PotentialKind::AttLog | PotentialKind::LoraLog => RegularizerKind::LogAmplified,
            PotentialKind::AttPower | PotentialKind::LoraPower => RegularizerKind::Power,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PotentialKind::AttNone => "att-none",
            PotentialKind::AttLog => "att-log",
            PotentialKind::AttPower => "att-power",
            PotentialKind::LoraNone => "lora-none",
            PotentialKind::LoraLog => "lora-log",
            PotentialKind::LoraPower => "lora-power",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn bounded(self) -> BoundedActivation {
        match self {
            Activation::Tanh => BoundedActivation::tanh(),
            Activation::Sigmoid => BoundedActivation::sigmoid(),
        }
    }
}

/// Attention head `t×d` inputs, rank `r` factors, `W_V = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSetup {
    pub t: usize,
    pub d: usize,
    pub r: usize,
    pub n: usize,
    /// Standard deviation of the Gaussian inputs and targets.
    pub data_scale: f64,
    pub beta: f64,
}

/// Two-layer net with `p` hidden units on `d` inputs, rank `r` factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSetup {
    pub p: usize,
    pub d: usize,
    pub r: usize,
    pub n: usize,
    pub data_scale: f64,
    pub activation: Activation,
    /// Fixed outer weights; drawn `N(0, 1/p)` from the data stream when absent.
    pub outer: Option<Vec<f64>>,
}

/// Penalty strength and power exponent; the kind comes from the potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySetup {
    pub lambda: f64,
    pub eps: f64,
}

pub enum BuiltPotential {
    Attention(AttentionPotential),
    Lora(LoraPotential),
}

impl BuiltPotential {
    pub fn as_dyn(&self) -> &dyn Potential {
        match self {
            BuiltPotential::Attention(p) => p,
            BuiltPotential::Lora(p) => p,
        }
    }

    pub fn regularizer(&self) -> &RegularizerSpec {
        match self {
            BuiltPotential::Attention(p) => &p.reg,
            BuiltPotential::Lora(p) => &p.reg,
        }
    }
}

fn gaussian<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn check_dims(name: &str, dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(usage(format!(
            "{name} dimensions and sample count must be positive"
        )));
    }
    Ok(())
}

/// Builds the potential named by `kind` on data drawn from stream
/// [`DATA_STREAM`] of `seed`. Factors enter as the potential's variable, so
/// the base factors are zero.
pub fn build_potential(
    kind: PotentialKind,
    penalty: PenaltySetup,
    attention: &AttentionSetup,
    lora: &LoraSetup,
    seed: u64,
) -> Result<BuiltPotential> {
    if !(penalty.lambda >= 0.0 && penalty.lambda.is_finite()) {
        return Err(usage(format!(
            "lambda must be nonnegative, got {}",
            penalty.lambda
        )));
    }
    let mut rng = stream_rng(seed, DATA_STREAM);
    let spec = |dims| match kind.regularizer_kind() {
        RegularizerKind::None => Ok(RegularizerSpec::none(dims)),
        RegularizerKind::LogAmplified => RegularizerSpec::log_amplified(penalty.lambda, dims),
        RegularizerKind::Power => RegularizerSpec::power(penalty.lambda, penalty.eps, dims),
    };
    if kind.is_attention() {
        let a = attention;
        check_dims("attention", &[a.t, a.d, a.r, a.n])?;
        let batch = (0..a.n)
            .map(|_| {
                let x = gaussian(a.t, a.d, a.data_scale, &mut rng);
                let y = gaussian(a.t, a.d, a.data_scale, &mut rng);
                AttnSample::new(x, y)
            })
            .collect::<villani_core::Result<Vec<_>>>()
            .map_err(invalid)?;
        let base = AttnParams::new(
            Matrix::zeros(a.d, a.r),
            Matrix::zeros(a.d, a.r),
            Matrix::identity(a.d),
            a.beta,
        )
        .map_err(invalid)?;
        let reg = spec((a.d * a.r, a.d * a.r)).map_err(invalid)?;
        Ok(BuiltPotential::Attention(
            AttentionPotential::new(batch, base, reg).map_err(invalid)?,
        ))
    } else {
        let l = lora;
        check_dims("lora", &[l.p, l.d, l.r, l.n])?;
        let batch: Vec<LoraSample> = (0..l.n)
            .map(|_| {
                let x = (0..l.d)
                    .map(|_| l.data_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let y = l.data_scale * rng.sample::<f64, _>(StandardNormal);
                LoraSample { x, y }
            })
            .collect();
        let outer = match &l.outer {
            Some(a) if a.len() != l.p => {
                return Err(usage(format!(
                    "lora.outer has {} entries but p = {}",
                    a.len(),
                    l.p
                )))
            }
            Some(a) => a.clone(),
            None => LoraParams::default_outer_weights(l.p, &mut rng),
        };
        let base = LoraParams::new(Matrix::zeros(l.p, l.r), Matrix::zeros(l.d, l.r), outer)
            .map_err(invalid)?;
        let reg = spec((l.p * l.r, l.d * l.r)).map_err(invalid)?;
        Ok(BuiltPotential::Lora(
            LoraPotential::new(batch, base, l.activation.bounded(), reg).map_err(invalid)?,
        ))
    }
}
