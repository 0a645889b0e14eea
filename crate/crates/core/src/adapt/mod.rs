//! Simulated downstream fine-tuning and the distribution it is drawn from.

mod config;
mod lowrank;
mod optimizer;
mod pretrain;
mod run;

pub use config::{sample_config, ConfigDistribution, FinetuneConfig, OptimizerKind, Parameterization};
pub use lowrank::{LowRankAdapter, LOW_RANK_INIT_STD};
pub use optimizer::{Optimizer, ADAMW_WEIGHT_DECAY, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use pretrain::{train_base, PretrainSettings};
pub use run::{adapt, adapt_observed, run_adaptation, AdaptPlan, Minibatches};
