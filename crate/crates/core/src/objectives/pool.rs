use serde::{Deserialize, Serialize};

use crate::diffusion::{ConceptSet, LabeledSample};
use crate::error::{Error, Result};
use crate::seeds;

/// Samples per concept for each data role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSizes {
    pub pretrain: usize,
    pub harmful: usize,
    pub harmful_heldout: usize,
    pub finetune: usize,
    pub attack_benign: usize,
    pub attack_harmful: usize,
}

impl Default for PoolSizes {
    fn default() -> Self {
        PoolSizes {
            pretrain: 500,
            harmful: 64,
            harmful_heldout: 64,
            finetune: 50,
            attack_benign: 25,
            attack_harmful: 100,
        }
    }
}

/// All data roles of an unlearning experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPool {
    /// Every concept, benign and harmful; trains the base model.
    pub pretrain: Vec<LabeledSample>,
    /// Samples the harmful loss is computed on during unlearning.
    pub harmful: Vec<LabeledSample>,
    /// Fresh harmful samples only used for evaluation.
    pub harmful_heldout: Vec<LabeledSample>,
    pub preserve_concepts: Vec<usize>,
    /// Benign samples that simulated fine-tuning subsets are drawn from.
    pub finetune_pool: Vec<LabeledSample>,
    pub attack_benign: Vec<LabeledSample>,
    pub attack_harmful: Vec<LabeledSample>,
}

impl DatasetPool {
    /// Each role is drawn from its own stream `data/<role>` under `seed`.
    pub fn generate(concepts: &ConceptSet, sizes: &PoolSizes, seed: u64) -> Result<Self> {
        let all: Vec<usize> = concepts.iter().map(|c| c.id).collect();
        let harmful = concepts.harmful_ids();
        let benign = concepts.benign_ids();
        if harmful.is_empty() {
            return Err(Error::Config("no harmful concepts declared".into()));
        }
        let role = |name: &str| seeds::derive_seed(seed, &format!("data/{name}"));
        let pool = DatasetPool {
            pretrain: concepts.generate(&all, sizes.pretrain, role("pretrain"))?,
            harmful: concepts.generate(&harmful, sizes.harmful, role("harmful"))?,
            harmful_heldout: concepts.generate(&harmful, sizes.harmful_heldout, role("harmful-heldout"))?,
            preserve_concepts: benign.clone(),
            finetune_pool: concepts.generate(&benign, sizes.finetune, role("finetune"))?,
            attack_benign: concepts.generate(&benign, sizes.attack_benign, role("attack-benign"))?,
            attack_harmful: concepts.generate(&harmful, sizes.attack_harmful, role("attack-harmful"))?,
        };
        pool.validate(concepts)?;
        Ok(pool)
    }

    pub fn validate(&self, concepts: &ConceptSet) -> Result<()> {
        let harmful_ok = |set: &[LabeledSample]| set.iter().all(|s| concepts.is_harmful(s.concept));
        let benign_ok = |set: &[LabeledSample]| {
            set.iter()
                .all(|s| s.concept < concepts.len() && !concepts.is_harmful(s.concept))
        };
        if self.harmful.is_empty() || !harmful_ok(&self.harmful) || !harmful_ok(&self.harmful_heldout) {
            return Err(Error::Config("harmful sets must be non-empty and harmful only".into()));
        }
        if !harmful_ok(&self.attack_harmful) {
            return Err(Error::Config("harmful attack set contains benign samples".into()));
        }
        if self
            .preserve_concepts
            .iter()
            .any(|&c| c >= concepts.len() || concepts.is_harmful(c))
        {
            return Err(Error::Config("preservation concepts must be benign".into()));
        }
        if !benign_ok(&self.finetune_pool) || !benign_ok(&self.attack_benign) {
            return Err(Error::Config("fine-tune pool must be benign".into()));
        }
        Ok(())
    }
}
