use rand::seq::SliceRandom;

use super::{FinetuneConfig, LowRankAdapter, Optimizer, Parameterization};
use crate::autodiff::{Graph, Objective, ParamBlock, ParamVector};
use crate::diffusion::LabeledSample;
use crate::error::{Error, Result};
use crate::objectives::Testbed;
use crate::seeds;

/// Data shuffled once by `seed` and then consumed cyclically.
#[derive(Clone, Debug)]
pub struct Minibatches {
    data: Vec<LabeledSample>,
    batch_size: usize,
}

impl Minibatches {
    pub fn new(data: &[LabeledSample], batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut data = data.to_vec();
        data.shuffle(&mut seeds::derived_rng(seed, "adapt/shuffle"));
        Ok(Minibatches { data, batch_size })
    }

    pub fn batch(&self, step: usize) -> Vec<LabeledSample> {
        let n = self.data.len();
        let start = step * self.batch_size;
        (0..self.batch_size).map(|i| self.data[(start + i) % n]).collect()
    }
}

/// Minibatch schedule and per-step losses of one adaptation run.
pub struct AdaptPlan<'a> {
    testbed: &'a Testbed,
    batches: Minibatches,
    config: FinetuneConfig,
}

impl<'a> AdaptPlan<'a> {
    pub fn new(testbed: &'a Testbed, d_ft: &[LabeledSample], config: &FinetuneConfig) -> Result<Self> {
        config.validate()?;
        if d_ft.is_empty() {
            return Err(Error::Usage("fine-tuning set is empty".into()));
        }
        Ok(AdaptPlan {
            testbed,
            batches: Minibatches::new(d_ft, config.batch_size, config.seed)?,
            config: *config,
        })
    }

    pub fn config(&self) -> &FinetuneConfig {
        &self.config
    }

    pub fn batch(&self, step: usize) -> Vec<LabeledSample> {
        self.batches.batch(step)
    }

    pub fn objective(&self, step: usize) -> Result<Graph> {
        self.testbed.ft_objective(
            &self.batch(step),
            self.config.loss_kind,
            seeds::derive_seed(self.config.seed, &format!("adapt/step:{step}")),
        )
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Numeric(_) => Error::AdaptationDiverged { step },
        other => other,
    }
}

/// Runs `config.steps` optimizer steps, asking `objective` for the loss of each
/// step. `observer` sees the effective parameters after every step (and once
/// before the first, with step 0). The input is never modified.
pub fn run_adaptation<O, F>(
    theta: &ParamVector,
    config: &FinetuneConfig,
    adapter_blocks: &[ParamBlock],
    mut objective: F,
    observer: &mut dyn FnMut(usize, &ParamVector) -> Result<()>,
) -> Result<ParamVector>
where
    O: Objective,
    F: FnMut(usize) -> Result<O>,
{
    config.validate()?;
    observer(0, theta)?;
    match config.parameterization {
        Parameterization::Full => {
            let mut params = theta.clone();
            let mut opt = Optimizer::new(config.optimizer, config.lr, params.dim());
            for step in 0..config.steps {
                let obj = objective(step)?;
                let (value, grad) = obj.value_and_grad(&params).map_err(diverged(step))?;
                if !value.is_finite() {
                    return Err(Error::AdaptationDiverged { step });
                }
                opt.step(params.as_mut_slice(), grad.as_slice());
                if !params.is_finite() {
                    return Err(Error::AdaptationDiverged { step });
                }
                observer(step + 1, &params)?;
            }
            Ok(params)
        }
        Parameterization::LowRank { rank } => {
            let mut adapter = LowRankAdapter::new(
                adapter_blocks.to_vec(),
                rank,
                seeds::derive_seed(config.seed, "adapt/low-rank-init"),
            );
            let mut opt = Optimizer::new(config.optimizer, config.lr, adapter.factors.len());
            let mut effective = adapter.effective(theta);
            for step in 0..config.steps {
                let obj = objective(step)?;
                let (value, grad) = obj.value_and_grad(&effective).map_err(diverged(step))?;
                if !value.is_finite() {
                    return Err(Error::AdaptationDiverged { step });
                }
                let fg = adapter.factor_grad(&grad);
                opt.step(&mut adapter.factors, &fg);
                effective = adapter.effective(theta);
                if !effective.is_finite() {
                    return Err(Error::AdaptationDiverged { step });
                }
                observer(step + 1, &effective)?;
            }
            Ok(effective)
        }
    }
}

/// Simulated downstream fine-tuning of `theta` on `d_ft`.
pub fn adapt(
    testbed: &Testbed,
    theta: &ParamVector,
    d_ft: &[LabeledSample],
    config: &FinetuneConfig,
) -> Result<ParamVector> {
    adapt_observed(testbed, theta, d_ft, config, &mut |_, _| Ok(()))
}

pub fn adapt_observed(
    testbed: &Testbed,
    theta: &ParamVector,
    d_ft: &[LabeledSample],
    config: &FinetuneConfig,
    observer: &mut dyn FnMut(usize, &ParamVector) -> Result<()>,
) -> Result<ParamVector> {
    if theta.dim() != testbed.original.dim() {
        return Err(Error::Config("parameters do not match the testbed architecture".into()));
    }
    let plan = AdaptPlan::new(testbed, d_ft, config)?;
    run_adaptation(
        theta,
        config,
        &testbed.arch.adapter_blocks(),
        |step| plan.objective(step),
        observer,
    )
}
