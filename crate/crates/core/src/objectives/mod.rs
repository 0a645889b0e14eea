//! Harmful loss, utility-preservation regularizer and the fine-tuning losses.

mod losses;
mod pool;
mod testbed;

pub use losses::{
    draw_batch, ft_loss, harmful_loss, preserve_loss, FtLossKind, HarmfulLoss, PriorPreservation,
};
pub use pool::{DatasetPool, PoolSizes};
pub use testbed::{ObjectiveSettings, Testbed};
