use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{FinetuneConfig, OptimizerKind, Parameterization, PretrainSettings};
use crate::autodiff::ParamVector;
use crate::diffusion::{Architecture, ConceptSet, NoiseSchedule, ScheduleDescriptor};
use crate::error::{Error, Result};
use crate::evalharness::EvalSettings;
use crate::objectives::{DatasetPool, FtLossKind, ObjectiveSettings, PoolSizes, Testbed};
use crate::resalign::ResalignSettings;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub concepts: usize,
    pub harmful: usize,
    pub component_std: f64,
    pub sizes: PoolSizes,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            concepts: 10,
            harmful: 2,
            component_std: 0.05,
            sizes: PoolSizes::default(),
        }
    }
}

/// Attack fine-tuning recipe plus the evaluation grid around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss_kind: FtLossKind,
    pub parameterization: Parameterization,
    /// Attack steps at which the resilience curve is evaluated.
    pub checkpoints: Vec<usize>,
    pub contamination_ratios: Vec<f64>,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            optimizer: OptimizerKind::Adam,
            lr: 5e-4,
            steps: 200,
            batch_size: 16,
            loss_kind: FtLossKind::Standard,
            parameterization: Parameterization::Full,
            checkpoints: vec![0, 25, 50, 100, 200],
            contamination_ratios: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    /// Write an intermediate checkpoint every this many outer steps; 0 disables.
    pub checkpoint_every: usize,
}

/// Everything a command needs besides its input and output files. Seeds of
/// the individual stages are derived from `seed`:
///
/// | stage | seed |
/// |---|---|
/// | data pool | `derive(seed, "data")` |
/// | base model training | `derive(seed, "pretrain")` |
/// | frozen-original generations | `derive(seed, "testbed")` |
/// | unlearning | `seed` |
/// | attacks and set mixing | `derive(seed, "attack")` |
/// | evaluation | `derive(seed, "eval")` |
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint of the frozen original model. Relative paths resolve
    /// against the directory of the config file.
    pub base_checkpoint: Option<PathBuf>,
    pub data: DataSettings,
    pub model: Architecture,
    pub schedule: ScheduleDescriptor,
    pub pretrain: PretrainSettings,
    pub objectives: ObjectiveSettings,
    pub unlearn: ResalignSettings,
    pub attack: AttackSettings,
    pub eval: EvalSettings,
    pub output: OutputSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads, validates and resolves a config file. A configured base
    /// checkpoint must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text, path)?;
        if let Some(base) = &config.base_checkpoint {
            let resolved = match path.parent() {
                Some(dir) if base.is_relative() => dir.join(base),
                _ => base.clone(),
            };
            if !resolved.is_file() {
                return Err(Error::Config(format!(
                    "base checkpoint {} does not exist",
                    resolved.display()
                )));
            }
            config.base_checkpoint = Some(resolved);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.num_concepts != self.data.concepts {
            return Err(Error::Config(format!(
                "model has {} concepts but data declares {}",
                self.model.num_concepts, self.data.concepts
            )));
        }
        self.schedule.build()?;
        self.concepts()?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr >= 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::Config("pretrain needs batch_size >= 1 and a finite lr >= 0".into()));
        }
        self.unlearn.validate()?;
        self.attack_config().validate()?;
        let cp = &self.attack.checkpoints;
        if cp.is_empty() || cp.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("attack checkpoints must be non-empty and strictly ascending".into()));
        }
        if let Some(r) = self.attack.contamination_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("contamination ratio {r} outside [0, 1]")));
        }
        if self.eval.n_samples < 100 || self.eval.n_probes == 0 {
            return Err(Error::Config("eval needs n_samples >= 100 and n_probes >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seeds::derive_seed(self.seed, stage)
    }

    pub fn concepts(&self) -> Result<ConceptSet> {
        ConceptSet::ring(self.data.concepts, self.data.harmful, self.data.component_std)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn pool(&self) -> Result<DatasetPool> {
        DatasetPool::generate(&self.concepts()?, &self.data.sizes, self.stage_seed("data"))
    }

    pub fn testbed(&self, original: ParamVector) -> Result<Testbed> {
        Testbed::new(
            self.model,
            self.schedule()?,
            self.concepts()?,
            self.pool()?,
            original,
            self.objectives,
            self.stage_seed("testbed"),
        )
    }

    pub fn unlearn_settings(&self) -> ResalignSettings {
        ResalignSettings {
            seed: self.seed,
            ..self.unlearn.clone()
        }
    }

    pub fn attack_config(&self) -> FinetuneConfig {
        let a = &self.attack;
        FinetuneConfig {
            optimizer: a.optimizer,
            lr: a.lr,
            steps: a.steps,
            loss_kind: a.loss_kind,
            parameterization: a.parameterization,
            batch_size: a.batch_size,
            seed: self.stage_seed("attack"),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            seed: self.stage_seed("eval"),
            ..self.eval
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[unlearn]\nbeta = 0.0\n", Path::new("x")).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.unlearn.beta, 0.0);
        assert_eq!(c.unlearn.alpha, 1.0);
        assert_eq!(c.unlearn_settings().seed, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml("[unlearn]\nbta = 0.1\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("[unlearn]\nseed = 3\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("[attack]\ncheckpoints = [5, 1]\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("[model]\nconcepts = 3\n", Path::new("x")).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default().with_seed(9);
        assert_ne!(c.stage_seed("data"), c.stage_seed("attack"));
        assert_eq!(c.attack_config().seed, c.stage_seed("attack"));
    }
}
