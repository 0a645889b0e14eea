use serde::{Deserialize, Serialize};

use super::StepComponents;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub harmful_loss: f64,
    pub preserve_loss: f64,
    pub mean_residual: f64,
    pub skipped: usize,
    pub grad_norm: f64,
}

/// Per-step diagnostics of an unlearning run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRunRecord {
    pub steps: Vec<StepRecord>,
}

impl UnlearnRunRecord {
    pub fn push(&mut self, c: &StepComponents) {
        self.steps.push(StepRecord {
            step: c.step,
            harmful_loss: c.terms.harmful_loss,
            preserve_loss: c.terms.preserve_loss,
            mean_residual: c.mean_residual(),
            skipped: c.skipped(),
            grad_norm: c.aggregate.norm(),
        });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
