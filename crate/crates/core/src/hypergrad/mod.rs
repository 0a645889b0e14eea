//! Implicit gradient of the harmful loss through a proximal fine-tuning step.
//!
//! With the fine-tuning Hessian `H` at the adapted parameters and the harmful
//! gradient `g` there, the implicit gradient solves `(I + gamma H) x = g`.
//! [`richardson`] solves it with a fixed number of matrix-free fixed-point
//! sweeps starting from zero.

mod oracles;

pub use oracles::{dense_solve, dense_solve_oracle, unrolled_grad, unrolled_grad_oracle};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Objective, ParamVector};
use crate::diffusion::LabeledSample;
use crate::error::{Error, Result};
use crate::objectives::{draw_batch, FtLossKind, Testbed};
use crate::seeds;

/// Which linear system the fixed-point sweep converges to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationForm {
    /// `x <- g - gamma H x`, fixed point of `(I + gamma H) x = g`.
    #[default]
    Proximal,
    /// `x <- g / gamma - H x / gamma`, fixed point of `(gamma I + H) x = g`.
    Shifted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypergradSettings {
    pub gamma: f64,
    pub iterations: usize,
    pub form: IterationForm,
    /// Stop early once the fixed-point residual drops to this value.
    pub residual_tol: f64,
    /// Size of the fixed batch the Hessian is evaluated on.
    pub hvp_batch: usize,
}

impl Default for HypergradSettings {
    fn default() -> Self {
        HypergradSettings {
            gamma: 1.0,
            iterations: 5,
            form: IterationForm::Proximal,
            residual_tol: 0.0,
            hvp_batch: 16,
        }
    }
}

impl HypergradSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("at least one Richardson iteration is required".into()));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::Config("residual tolerance must be >= 0".into()));
        }
        if self.hvp_batch == 0 {
            return Err(Error::Config("Hessian batch must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergradResult {
    pub x: ParamVector,
    /// `||x - T(x)||` for the returned iterate, where `T` is one sweep.
    pub residual_norm: f64,
    /// `residual_norm / ||T(0)||`; zero when the right-hand side vanishes.
    pub relative_residual: f64,
    /// Sweeps applied to reach the returned iterate.
    pub iterations_run: usize,
    pub diverged: bool,
    /// Residual of every iterate from `x0 = 0` onwards.
    pub residuals: Vec<f64>,
}

/// Right-hand side and sweep scaling of each form. Every factor of gamma in
/// the solver goes through here.
struct Sweep {
    b: ParamVector,
    h_scale: f64,
}

impl Sweep {
    fn new(form: IterationForm, gamma: f64, g: &ParamVector) -> Self {
        let b = g.scaled(1.0 / gamma);
        match form {
            IterationForm::Proximal => Sweep {
                b: b.scaled(gamma),
                h_scale: gamma,
            },
            IterationForm::Shifted => Sweep {
                b,
                h_scale: 1.0 / gamma,
            },
        }
    }

    fn apply(&self, hx: &ParamVector) -> ParamVector {
        let mut out = self.b.clone();
        out.axpy(-self.h_scale, hx);
        out
    }
}

/// Residuals below this fraction of the right-hand side are round-off; growth
/// there is not divergence.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

/// Fixed-point iteration for the implicit gradient given a Hessian-vector
/// product. Divergence is declared when the residual grows on two consecutive
/// sweeps (above [`ROUNDOFF_FLOOR`]) or an iterate stops being finite; the
/// iterate from before the growth is returned.
pub fn richardson(
    mut hvp: impl FnMut(&ParamVector) -> Result<ParamVector>,
    g: &ParamVector,
    settings: &HypergradSettings,
) -> Result<HypergradResult> {
    settings.validate()?;
    if !g.is_finite() {
        return Err(Error::Numeric("harmful gradient is not finite".into()));
    }
    let sweep = Sweep::new(settings.form, settings.gamma, g);
    let rhs_norm = sweep.b.norm();
    let relative = |r: f64| if rhs_norm > 0.0 { r / rhs_norm } else { 0.0 };

    let mut iterates = vec![ParamVector::zeros(g.dim())];
    let mut next = sweep.b.clone();
    let mut residuals = vec![rhs_norm];
    let finish = |iterates: &mut Vec<ParamVector>, residuals: Vec<f64>, k: usize, diverged: bool| {
        let x = iterates.swap_remove(k);
        HypergradResult {
            x,
            residual_norm: residuals[k],
            relative_residual: relative(residuals[k]),
            iterations_run: k,
            diverged,
            residuals,
        }
    };

    for k in 1..=settings.iterations {
        if residuals[k - 1] <= settings.residual_tol {
            let mut it = iterates;
            return Ok(finish(&mut it, residuals, k - 1, false));
        }
        let x = next;
        if !x.is_finite() {
            let mut it = iterates;
            return Ok(finish(&mut it, residuals, k - 1, true));
        }
        let hx = hvp(&x)?;
        next = sweep.apply(&hx);
        let r = x.sub(&next).norm();
        iterates.push(x);
        residuals.push(if r.is_finite() { r } else { f64::INFINITY });
        let n = residuals.len();
        if !r.is_finite() {
            let mut it = iterates;
            return Ok(finish(&mut it, residuals, k - 1, true));
        }
        let above_floor = residuals[n - 1] > ROUNDOFF_FLOOR * rhs_norm;
        if n >= 3 && above_floor && residuals[n - 1] > residuals[n - 2] && residuals[n - 2] > residuals[n - 3] {
            let mut it = iterates;
            return Ok(finish(&mut it, residuals, n - 3, true));
        }
    }
    let k = settings.iterations;
    Ok(finish(&mut iterates, residuals, k, false))
}

/// Implicit hypergradient at the adapted parameters `theta_ft`.
///
/// The harmful gradient is taken on a training harmful batch chosen by
/// `seed`; the Hessian of the `loss_kind` fine-tuning loss is taken on a fixed
/// batch of `settings.hvp_batch` samples of `d_ft`, also chosen by `seed`.
pub fn get_hypergrad(
    testbed: &Testbed,
    theta: &ParamVector,
    theta_ft: &ParamVector,
    d_ft: &[LabeledSample],
    loss_kind: FtLossKind,
    settings: &HypergradSettings,
    seed: u64,
) -> Result<HypergradResult> {
    settings.validate()?;
    if theta.dim() != theta_ft.dim() || theta.dim() != testbed.original.dim() {
        return Err(Error::Config(format!(
            "dimension mismatch: theta {}, adapted {}, model {}",
            theta.dim(),
            theta_ft.dim(),
            testbed.original.dim()
        )));
    }
    if d_ft.is_empty() {
        return Err(Error::Usage("fine-tuning set is empty".into()));
    }
    let g = testbed
        .harmful_objective(seeds::derive_seed(seed, "hypergrad/harmful"))?
        .grad(theta_ft)?;
    if !g.is_finite() {
        return Err(Error::Numeric("harmful gradient at the adapted parameters is not finite".into()));
    }
    let mut rng = seeds::derived_rng(seed, "hypergrad/hvp-batch");
    let batch = draw_batch(d_ft, settings.hvp_batch, &mut rng)?;
    let ft = testbed.ft_objective(&batch, loss_kind, seeds::derive_seed(seed, "hypergrad/hvp-noise"))?;
    richardson(|v| ft.hvp(theta_ft, v), &g, settings)
}
