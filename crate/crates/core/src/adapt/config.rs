use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::FtLossKind;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Parameterization {
    Full,
    LowRank { rank: usize },
}

/// One downstream fine-tuning recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub loss_kind: FtLossKind,
    pub parameterization: Parameterization,
    pub batch_size: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Zero steps and a zero learning rate are accepted; both leave the
    /// parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Parameterization::LowRank { rank } = self.parameterization {
            if rank == 0 {
                return Err(Error::Config("low-rank adapters need rank >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn sgd(lr: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        FinetuneConfig {
            optimizer: OptimizerKind::Sgd,
            lr,
            steps,
            loss_kind: FtLossKind::Standard,
            parameterization: Parameterization::Full,
            batch_size,
            seed,
        }
    }
}

/// Finite choice sets sampled uniformly and independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDistribution {
    pub lr_choices: Vec<f64>,
    pub step_choices: Vec<usize>,
    pub loss_choices: Vec<FtLossKind>,
    pub param_choices: Vec<Parameterization>,
    pub optimizer_choices: Vec<OptimizerKind>,
    pub batch_size: usize,
}

impl Default for ConfigDistribution {
    fn default() -> Self {
        ConfigDistribution {
            lr_choices: vec![1e-4, 1e-5, 1e-6],
            step_choices: vec![5, 10, 20, 30],
            loss_choices: vec![FtLossKind::Standard, FtLossKind::PriorPreservation],
            param_choices: vec![Parameterization::Full, Parameterization::LowRank { rank: 4 }],
            optimizer_choices: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            batch_size: 16,
        }
    }
}

impl ConfigDistribution {
    pub fn singleton(config: &FinetuneConfig) -> Self {
        ConfigDistribution {
            lr_choices: vec![config.lr],
            step_choices: vec![config.steps],
            loss_choices: vec![config.loss_kind],
            param_choices: vec![config.parameterization],
            optimizer_choices: vec![config.optimizer],
            batch_size: config.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_choices.is_empty()
            || self.step_choices.is_empty()
            || self.loss_choices.is_empty()
            || self.param_choices.is_empty()
            || self.optimizer_choices.is_empty()
        {
            return Err(Error::Config("every configuration choice set must be non-empty".into()));
        }
        Ok(())
    }
}

/// Independent uniform draw per factor. The sampled config carries its own
/// seed for minibatch order and noise draws.
pub fn sample_config(dist: &ConfigDistribution, seed: u64) -> Result<FinetuneConfig> {
    dist.validate()?;
    let mut rng = seeds::rng(seed);
    let pick = |e: &str| Error::Config(format!("empty {e} choices"));
    let config = FinetuneConfig {
        lr: *dist.lr_choices.choose(&mut rng).ok_or_else(|| pick("lr"))?,
        steps: *dist.step_choices.choose(&mut rng).ok_or_else(|| pick("step"))?,
        loss_kind: *dist.loss_choices.choose(&mut rng).ok_or_else(|| pick("loss"))?,
        parameterization: *dist.param_choices.choose(&mut rng).ok_or_else(|| pick("parameterization"))?,
        optimizer: *dist.optimizer_choices.choose(&mut rng).ok_or_else(|| pick("optimizer"))?,
        batch_size: dist.batch_size,
        seed: seeds::derive_seed(seed, "config/run"),
    };
    config.validate()?;
    Ok(config)
}
