use nalgebra::{DMatrix, DVector};

use super::IterationForm;
use crate::adapt::{AdaptPlan, FinetuneConfig, OptimizerKind, Parameterization};
use crate::autodiff::{Objective, ParamVector};
use crate::diffusion::LabeledSample;
use crate::error::{Error, Result};
use crate::objectives::Testbed;
use crate::seeds;

/// Largest system the dense oracles accept.
pub const ORACLE_MAX_DIM: usize = 2000;

/// Solves `(I + gamma H) x = g` by LU factorization.
pub fn dense_solve_oracle(h: &[Vec<f64>], g: &ParamVector, gamma: f64) -> Result<ParamVector> {
    dense_solve(h, g, gamma, IterationForm::Proximal)
}

/// Direct solve of the system whose fixed point `form` iterates towards.
pub fn dense_solve(h: &[Vec<f64>], g: &ParamVector, gamma: f64, form: IterationForm) -> Result<ParamVector> {
    let d = g.dim();
    if d > ORACLE_MAX_DIM {
        return Err(Error::OracleUnsupported(format!("dimension {d} exceeds {ORACLE_MAX_DIM}")));
    }
    if h.len() != d || h.iter().any(|row| row.len() != d) {
        return Err(Error::Config(format!("Hessian is not {d} x {d}")));
    }
    let (diag, scale) = match form {
        IterationForm::Proximal => (1.0, gamma),
        IterationForm::Shifted => (gamma, 1.0),
    };
    let a = DMatrix::from_fn(d, d, |i, j| scale * h[i][j] + if i == j { diag } else { 0.0 });
    let b = DVector::from_column_slice(g.as_slice());
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Oracle("singular system".into()))?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Oracle("solution is not finite".into()));
    }
    Ok(ParamVector::new(x.iter().copied().collect()))
}

/// Exact gradient of `harmful` at the end of `steps` plain gradient steps of
/// size `lr`, differentiated through the whole trajectory: the final gradient
/// is pulled back through `I - lr H_t` for every step in reverse order.
pub fn unrolled_grad<O, F>(
    theta: &ParamVector,
    lr: f64,
    steps: usize,
    mut objective: F,
    harmful: &dyn Objective,
) -> Result<ParamVector>
where
    O: Objective,
    F: FnMut(usize) -> Result<O>,
{
    let mut trajectory = Vec::with_capacity(steps);
    let mut params = theta.clone();
    for step in 0..steps {
        let obj = objective(step)?;
        let grad = obj.grad(&params)?;
        let next = {
            let mut p = params.clone();
            p.axpy(-lr, &grad);
            p
        };
        trajectory.push((obj, params));
        params = next;
    }
    let mut v = harmful.grad(&params)?;
    for (obj, at) in trajectory.iter().rev() {
        let hv = obj.hvp(at, &v)?;
        v.axpy(-lr, &hv);
    }
    if !v.is_finite() {
        return Err(Error::Numeric("unrolled gradient is not finite".into()));
    }
    Ok(v)
}

/// Unrolled reference for the hypergradient of one full-parameter SGD
/// adaptation. Uses the same harmful batch as the implicit solver for `seed`.
pub fn unrolled_grad_oracle(
    testbed: &Testbed,
    theta: &ParamVector,
    d_ft: &[LabeledSample],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<ParamVector> {
    if config.optimizer != OptimizerKind::Sgd || config.parameterization != Parameterization::Full {
        return Err(Error::OracleUnsupported(
            "the unrolled oracle handles full-parameter SGD only".into(),
        ));
    }
    if theta.dim() > ORACLE_MAX_DIM {
        return Err(Error::OracleUnsupported(format!(
            "dimension {} exceeds {ORACLE_MAX_DIM}",
            theta.dim()
        )));
    }
    if theta.dim() != testbed.original.dim() {
        return Err(Error::Config("parameters do not match the testbed architecture".into()));
    }
    let plan = AdaptPlan::new(testbed, d_ft, config)?;
    let harmful = testbed.harmful_objective(seeds::derive_seed(seed, "hypergrad/harmful"))?;
    unrolled_grad(theta, config.lr, config.steps, |s| plan.objective(s), &harmful)
}
