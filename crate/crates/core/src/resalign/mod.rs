//! Outer unlearning loops: the plain harmful-plus-regularizer descent and the
//! resilient variant that adds implicit hypergradients through sampled
//! downstream fine-tuning runs.

mod record;

pub use record::{StepRecord, UnlearnRunRecord};

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt, sample_config, ConfigDistribution, FinetuneConfig, Optimizer, OptimizerKind};
use crate::autodiff::{Objective, ParamVector};
use crate::error::{Error, Result};
use crate::hypergrad::{get_hypergrad, HypergradSettings};
use crate::objectives::{draw_batch, Testbed};
use crate::seeds;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    Sgd,
    #[default]
    Adam,
}

impl OuterOptimizer {
    fn build(self, lr: f64, dim: usize) -> Optimizer {
        let kind = match self {
            OuterOptimizer::Sgd => OptimizerKind::Sgd,
            OuterOptimizer::Adam => OptimizerKind::Adam,
        };
        Optimizer::new(kind, lr, dim)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Resalign,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResalignSettings {
    pub alpha: f64,
    pub beta: f64,
    pub outer_lr: f64,
    pub outer_steps: usize,
    pub inner_samples: usize,
    /// Size of each sampled fine-tuning set.
    pub inner_set_size: usize,
    pub outer_optimizer: OuterOptimizer,
    pub hypergrad: HypergradSettings,
    pub config_dist: ConfigDistribution,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ResalignSettings {
    fn default() -> Self {
        ResalignSettings {
            alpha: 1.0,
            beta: 0.8,
            outer_lr: 2e-4,
            outer_steps: 120,
            inner_samples: 4,
            inner_set_size: 50,
            outer_optimizer: OuterOptimizer::Adam,
            hypergrad: HypergradSettings::default(),
            config_dist: ConfigDistribution::default(),
            seed: 0,
        }
    }
}

impl ResalignSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} must lie in [0, 1]", self.beta)));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::Config(format!("outer learning rate {} must be positive", self.outer_lr)));
        }
        if self.outer_steps == 0 {
            return Err(Error::Config("outer_steps must be at least 1".into()));
        }
        if self.inner_samples == 0 || self.inner_set_size == 0 {
            return Err(Error::Config("inner_samples and inner_set_size must be at least 1".into()));
        }
        self.hypergrad.validate()?;
        self.config_dist.validate()
    }
}

fn step_seed(seed: u64, step: usize, leaf: &str) -> u64 {
    seeds::derive_seed(seed, &format!("unlearn/outer:{step}/{leaf}"))
}

fn inner_seed(seed: u64, step: usize, sample: usize, leaf: &str) -> u64 {
    seeds::derive_seed(seed, &format!("unlearn/outer:{step}/inner:{sample}/{leaf}"))
}

/// Harmful and regularizer terms at `theta` for outer step `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseTerms {
    pub harmful_loss: f64,
    pub preserve_loss: f64,
    pub grad_harmful: ParamVector,
    pub grad_preserve: ParamVector,
}

pub fn base_terms(testbed: &Testbed, theta: &ParamVector, step: usize, seed: u64) -> Result<BaseTerms> {
    let (harmful_loss, grad_harmful) = testbed
        .harmful_objective(step_seed(seed, step, "harmful"))?
        .value_and_grad(theta)?;
    let (preserve_loss, grad_preserve) = testbed
        .preserve_objective(step_seed(seed, step, "preserve"))?
        .value_and_grad(theta)?;
    Ok(BaseTerms {
        harmful_loss,
        preserve_loss,
        grad_harmful,
        grad_preserve,
    })
}

/// `grad L_harmful + alpha grad R`.
pub fn baseline_gradient(terms: &BaseTerms, alpha: f64) -> ParamVector {
    let mut g = terms.grad_harmful.clone();
    g.axpy(alpha, &terms.grad_preserve);
    g
}

/// One plain gradient step on `L_harmful + alpha R`.
pub fn baseline_unlearn_step(
    testbed: &Testbed,
    theta: &ParamVector,
    alpha: f64,
    lr: f64,
    step: usize,
    seed: u64,
) -> Result<ParamVector> {
    let g = baseline_gradient(&base_terms(testbed, theta, step, seed)?, alpha);
    if !g.is_finite() {
        return Err(Error::Numeric(format!("unlearning gradient at step {step} is not finite")));
    }
    let mut next = theta.clone();
    next.axpy(-lr, &g);
    Ok(next)
}

/// Outcome of one sampled downstream fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerSample {
    pub config: FinetuneConfig,
    /// `None` when adaptation or the Richardson solve diverged.
    pub hypergrad: Option<ParamVector>,
    pub residual: f64,
    pub relative_residual: f64,
    pub iterations: usize,
}

impl InnerSample {
    pub fn skipped(&self) -> bool {
        self.hypergrad.is_none()
    }
}

/// Everything that enters one outer update, kept so the update can be
/// rebuilt offline.
#[derive(Clone, Debug, PartialEq)]
pub struct StepComponents {
    pub step: usize,
    pub terms: BaseTerms,
    pub inner: Vec<InnerSample>,
    /// The vector handed to the outer optimizer.
    pub aggregate: ParamVector,
}

impl StepComponents {
    pub fn survivors(&self) -> usize {
        self.inner.iter().filter(|s| !s.skipped()).count()
    }

    pub fn skipped(&self) -> usize {
        self.inner.len() - self.survivors()
    }

    /// Mean relative residual over the surviving inner samples.
    pub fn mean_residual(&self) -> f64 {
        let r: Vec<f64> = self
            .inner
            .iter()
            .filter(|s| !s.skipped())
            .map(|s| s.relative_residual)
            .collect();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

/// Samples a fine-tuning set and configuration, adapts `theta` and returns
/// the implicit hypergradient at the adapted point.
pub fn inner_sample(
    testbed: &Testbed,
    theta: &ParamVector,
    settings: &ResalignSettings,
    step: usize,
    sample: usize,
) -> Result<InnerSample> {
    let seed = settings.seed;
    let mut rng = seeds::rng(inner_seed(seed, step, sample, "data"));
    let d_ft = draw_batch(&testbed.pool.finetune_pool, settings.inner_set_size, &mut rng)?;
    let config = sample_config(&settings.config_dist, inner_seed(seed, step, sample, "config"))?;
    let theta_ft = match adapt(testbed, theta, &d_ft, &config) {
        Ok(p) => p,
        Err(Error::AdaptationDiverged { .. }) => {
            return Ok(InnerSample {
                config,
                hypergrad: None,
                residual: f64::NAN,
                relative_residual: f64::NAN,
                iterations: 0,
            })
        }
        Err(e) => return Err(e),
    };
    let h = get_hypergrad(
        testbed,
        theta,
        &theta_ft,
        &d_ft,
        config.loss_kind,
        &settings.hypergrad,
        inner_seed(seed, step, sample, "hypergrad"),
    )?;
    Ok(InnerSample {
        config,
        hypergrad: (!h.diverged).then_some(h.x),
        residual: h.residual_norm,
        relative_residual: h.relative_residual,
        iterations: h.iterations_run,
    })
}

/// `(1 - beta) grad L_harmful + alpha grad R + beta * mean_j x_j`, the mean
/// taken over the inner samples that did not diverge. With `beta = 0` no
/// inner sample is drawn.
pub fn resalign_gradient(
    testbed: &Testbed,
    theta: &ParamVector,
    settings: &ResalignSettings,
    step: usize,
) -> Result<StepComponents> {
    let terms = base_terms(testbed, theta, step, settings.seed)?;
    let mut aggregate = terms.grad_harmful.scaled(1.0 - settings.beta);
    aggregate.axpy(settings.alpha, &terms.grad_preserve);
    let mut inner = Vec::new();
    if settings.beta > 0.0 {
        for j in 0..settings.inner_samples {
            inner.push(inner_sample(testbed, theta, settings, step, j)?);
        }
        let survivors: Vec<&ParamVector> = inner.iter().filter_map(|s| s.hypergrad.as_ref()).collect();
        if survivors.is_empty() {
            return Err(Error::AllInnerDiverged {
                step,
                samples: settings.inner_samples,
            });
        }
        let w = settings.beta / survivors.len() as f64;
        for x in survivors {
            aggregate.axpy(w, x);
        }
    }
    if !aggregate.is_finite() {
        return Err(Error::Numeric(format!("aggregate gradient at step {step} is not finite")));
    }
    Ok(StepComponents {
        step,
        terms,
        inner,
        aggregate,
    })
}

/// Outer loop state: the parameters and the outer optimizer's moments.
pub struct Unlearner<'a> {
    testbed: &'a Testbed,
    settings: ResalignSettings,
    method: Method,
    optimizer: Optimizer,
    theta: ParamVector,
    step: usize,
}

impl<'a> Unlearner<'a> {
    pub fn new(testbed: &'a Testbed, theta0: &ParamVector, settings: &ResalignSettings, method: Method) -> Result<Self> {
        settings.validate()?;
        if theta0.dim() != testbed.original.dim() {
            return Err(Error::Config("parameters do not match the testbed architecture".into()));
        }
        Ok(Unlearner {
            testbed,
            settings: settings.clone(),
            method,
            optimizer: settings.outer_optimizer.build(settings.outer_lr, theta0.dim()),
            theta: theta0.clone(),
            step: 0,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.theta
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one outer update and returns what went into it.
    pub fn step(&mut self) -> Result<StepComponents> {
        let i = self.step;
        let components = match self.method {
            Method::Resalign => resalign_gradient(self.testbed, &self.theta, &self.settings, i),
            Method::Baseline => base_terms(self.testbed, &self.theta, i, self.settings.seed).map(|terms| {
                let aggregate = baseline_gradient(&terms, self.settings.alpha);
                StepComponents {
                    step: i,
                    terms,
                    inner: Vec::new(),
                    aggregate,
                }
            }),
        }
        .map_err(|e| match e {
            e @ Error::AllInnerDiverged { .. } => e,
            e => Error::OuterStep {
                step: i,
                source: Box::new(e),
            },
        })?;
        if !components.aggregate.is_finite() {
            return Err(Error::OuterStep {
                step: i,
                source: Box::new(Error::Numeric("outer gradient is not finite".into())),
            });
        }
        self.optimizer.step(self.theta.as_mut_slice(), components.aggregate.as_slice());
        self.step += 1;
        Ok(components)
    }
}

/// One resilient outer step from a fresh optimizer state.
pub fn resalign_step(
    testbed: &Testbed,
    theta: &ParamVector,
    settings: &ResalignSettings,
    step: usize,
) -> Result<(ParamVector, StepComponents)> {
    let components = resalign_gradient(testbed, theta, settings, step)?;
    let mut opt = settings.outer_optimizer.build(settings.outer_lr, theta.dim());
    let mut next = theta.clone();
    opt.step(next.as_mut_slice(), components.aggregate.as_slice());
    Ok((next, components))
}

/// Runs `settings.outer_steps` updates of `method`. `observer` sees the
/// parameters after each step (1-based).
pub fn run_unlearning(
    testbed: &Testbed,
    theta0: &ParamVector,
    settings: &ResalignSettings,
    method: Method,
    observer: &mut dyn FnMut(usize, &ParamVector, &StepComponents) -> Result<()>,
) -> Result<(ParamVector, UnlearnRunRecord)> {
    let mut u = Unlearner::new(testbed, theta0, settings, method)?;
    let mut record = UnlearnRunRecord::default();
    for _ in 0..settings.outer_steps {
        let c = u.step()?;
        record.push(&c);
        observer(u.steps_taken(), u.params(), &c)?;
    }
    Ok((u.theta, record))
}

pub fn run_resalign(
    testbed: &Testbed,
    theta0: &ParamVector,
    settings: &ResalignSettings,
) -> Result<(ParamVector, UnlearnRunRecord)> {
    run_unlearning(testbed, theta0, settings, Method::Resalign, &mut |_, _, _| Ok(()))
}

pub fn run_baseline(
    testbed: &Testbed,
    theta0: &ParamVector,
    settings: &ResalignSettings,
) -> Result<(ParamVector, UnlearnRunRecord)> {
    run_unlearning(testbed, theta0, settings, Method::Baseline, &mut |_, _, _| Ok(()))
}
