use serde::{Deserialize, Serialize};

use super::{run_adaptation, FinetuneConfig, Minibatches, OptimizerKind, Parameterization};
use crate::autodiff::ParamVector;
use crate::diffusion::{denoise_loss, Architecture, LabeledSample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::objectives::FtLossKind;
use crate::seeds;

/// Budget of the base-model training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            steps: 20_000,
            lr: 1e-3,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Trains a freshly initialized denoiser on `data` with the denoising loss.
/// A zero step budget returns the initialization.
pub fn train_base(
    arch: &Architecture,
    schedule: &NoiseSchedule,
    data: &[LabeledSample],
    settings: &PretrainSettings,
    seed: u64,
    observer: &mut dyn FnMut(usize, &ParamVector) -> Result<()>,
) -> Result<ParamVector> {
    arch.validate()?;
    if data.iter().any(|s| s.concept >= arch.num_concepts) {
        return Err(Error::Config("training data refers to concepts the model does not have".into()));
    }
    let init = arch.init(seeds::derive_seed(seed, "pretrain/init"));
    let config = FinetuneConfig {
        optimizer: settings.optimizer,
        lr: settings.lr,
        steps: settings.steps,
        loss_kind: FtLossKind::Standard,
        parameterization: Parameterization::Full,
        batch_size: settings.batch_size,
        seed: seeds::derive_seed(seed, "pretrain/order"),
    };
    let batches = Minibatches::new(data, settings.batch_size, config.seed)?;
    run_adaptation(
        &init,
        &config,
        &[],
        |step| {
            denoise_loss(
                arch,
                &batches.batch(step),
                schedule,
                seeds::derive_seed(seed, &format!("pretrain/step:{step}")),
            )
        },
        observer,
    )
}
