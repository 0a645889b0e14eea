use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Objective, ParamVector};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_probes: usize,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean of `z^T H z` over Rademacher probes `z`.
pub fn hutchinson_trace(objective: &dyn Objective, params: &ParamVector, n_probes: usize, seed: u64) -> Result<TraceEstimate> {
    if n_probes == 0 {
        return Err(Error::Usage("at least one probe is required".into()));
    }
    let mut rng = seeds::derived_rng(seed, "hutchinson/probes");
    let mut values = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let z = ParamVector::new(
            (0..params.dim())
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        );
        let q = z.dot(&objective.hvp(params, &z)?);
        if !q.is_finite() {
            return Err(Error::Numeric("Hessian-vector product is not finite".into()));
        }
        values.push(q);
    }
    let (estimate, std_error) = mean_and_se(&values);
    Ok(TraceEstimate {
        estimate,
        std_error,
        n_probes,
    })
}

/// Both sides of `E[L(theta + sigma z) - L(theta)] ~ sigma^2 / (2d) Tr(H)` for
/// `z ~ N(0, I/d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheckResult {
    pub lhs: f64,
    pub lhs_std_error: f64,
    pub rhs: f64,
    pub rhs_std_error: f64,
    pub trace: TraceEstimate,
    pub sigma: f64,
    pub d: usize,
    pub n_draws: usize,
}

impl TaylorCheckResult {
    pub fn relative_gap(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.rhs.abs()
    }
}

/// Monte Carlo left side over `n_draws` antithetic pairs `(z, -z)`, whose
/// odd-order terms cancel exactly; right side from a Hutchinson estimate with
/// `trace_probes` probes.
pub fn taylor_gap_check(
    objective: &dyn Objective,
    params: &ParamVector,
    sigma: f64,
    n_draws: usize,
    trace_probes: usize,
    seed: u64,
) -> Result<TaylorCheckResult> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!("sigma {sigma} must be finite and >= 0")));
    }
    if n_draws == 0 {
        return Err(Error::Usage("at least one draw is required".into()));
    }
    let d = params.dim();
    let scale = sigma / (d as f64).sqrt();
    let base = objective.value(params)?;
    let mut rng = seeds::derived_rng(seed, "taylor/draws");
    let mut diffs = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let xi = ParamVector::new((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect());
        let up = objective.value(&params.add(&xi))?;
        let down = objective.value(&params.sub(&xi))?;
        diffs.push(0.5 * (up + down) - base);
    }
    let (lhs, lhs_std_error) = mean_and_se(&diffs);
    let trace = hutchinson_trace(objective, params, trace_probes, seeds::derive_seed(seed, "taylor/trace"))?;
    let factor = sigma * sigma / (2.0 * d as f64);
    Ok(TaylorCheckResult {
        lhs,
        lhs_std_error,
        rhs: factor * trace.estimate,
        rhs_std_error: factor * trace.std_error,
        trace,
        sigma,
        d,
        n_draws,
    })
}
