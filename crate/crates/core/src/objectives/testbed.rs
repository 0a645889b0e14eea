use serde::{Deserialize, Serialize};

use super::{draw_batch, ft_loss, harmful_loss, preserve_loss, DatasetPool, FtLossKind, HarmfulLoss, PriorPreservation};
use crate::autodiff::{Graph, ParamVector};
use crate::diffusion::{sample_labels, Architecture, ConceptSet, LabeledSample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSettings {
    pub batch_size: usize,
    /// Harmful loss values are floored at `-clamp_max`.
    pub clamp_max: f64,
    pub prior_weight: f64,
    /// Cached generations of the frozen original per preservation concept.
    pub generations_per_concept: usize,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            batch_size: 16,
            clamp_max: 10.0,
            prior_weight: 1.0,
            generations_per_concept: 64,
        }
    }
}

/// Everything that stays fixed while one base model is unlearned and attacked:
/// the architecture, schedule, data, the frozen original and its cached
/// generations.
#[derive(Clone, Debug)]
pub struct Testbed {
    pub arch: Architecture,
    pub schedule: NoiseSchedule,
    pub concepts: ConceptSet,
    pub pool: DatasetPool,
    pub original: ParamVector,
    pub original_generations: Vec<LabeledSample>,
    pub settings: ObjectiveSettings,
}

impl Testbed {
    pub fn new(
        arch: Architecture,
        schedule: NoiseSchedule,
        concepts: ConceptSet,
        pool: DatasetPool,
        original: ParamVector,
        settings: ObjectiveSettings,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if original.dim() != arch.param_count() {
            return Err(Error::Config("original parameters do not match the architecture".into()));
        }
        if arch.num_concepts != concepts.len() {
            return Err(Error::Config("architecture and concept catalogue disagree".into()));
        }
        pool.validate(&concepts)?;
        let labels: Vec<usize> = pool
            .preserve_concepts
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, settings.generations_per_concept))
            .collect();
        let points = sample_labels(
            &arch,
            &original,
            &labels,
            &schedule,
            seeds::derive_seed(seed, "testbed/original-generations"),
        )?;
        let original_generations = points
            .into_iter()
            .zip(labels)
            .map(|(x, concept)| LabeledSample { x, concept })
            .collect();
        Ok(Testbed {
            arch,
            schedule,
            concepts,
            pool,
            original,
            original_generations,
            settings,
        })
    }

    /// The network every loss and sampler of this testbed runs.
    pub fn predictor(&self) -> &dyn NoisePredictor {
        &self.arch
    }

    /// Harmful loss on a batch of the training harmful set chosen by `seed`.
    pub fn harmful_objective(&self, seed: u64) -> Result<HarmfulLoss> {
        let mut rng = seeds::rng(seed);
        let batch = draw_batch(&self.pool.harmful, self.settings.batch_size, &mut rng)?;
        harmful_loss(
            self.predictor(),
            &batch,
            &self.concepts,
            &self.schedule,
            seeds::derive_seed(seed, "noise"),
            self.settings.clamp_max,
        )
    }

    /// Harmful loss over the whole held-out harmful set.
    pub fn heldout_harmful_objective(&self, seed: u64) -> Result<HarmfulLoss> {
        harmful_loss(
            self.predictor(),
            &self.pool.harmful_heldout,
            &self.concepts,
            &self.schedule,
            seed,
            self.settings.clamp_max,
        )
    }

    pub fn preserve_objective(&self, seed: u64) -> Result<Graph> {
        preserve_loss(
            self.predictor(),
            &self.original,
            &self.original_generations,
            &self.schedule,
            self.settings.batch_size,
            seed,
        )
    }

    pub fn ft_objective(&self, batch: &[LabeledSample], kind: FtLossKind, seed: u64) -> Result<Graph> {
        ft_loss(
            self.predictor(),
            batch,
            &self.schedule,
            kind,
            Some(PriorPreservation {
                samples: &self.original_generations,
                weight: self.settings.prior_weight,
            }),
            seed,
        )
    }
}
