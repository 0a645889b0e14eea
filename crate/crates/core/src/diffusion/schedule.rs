use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Variance-preserving forward process with per-step coefficients. Index
/// `t` runs from 1 to `steps()`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    weight: Vec<f64>,
}

/// Constant per-timestep loss weight of the toy testbed. With unit weights the
/// fine-tuning Hessian of the default denoiser has top eigenvalues of 30 to 90,
/// which puts the proximal Richardson iteration out of its convergence region
/// for every proximity coefficient up to 1.
pub const DEFAULT_LOSS_WEIGHT: f64 = 1.0 / 256.0;

/// The numbers that pin down a schedule; used in checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleDescriptor {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub loss_weight: f64,
}

impl Default for ScheduleDescriptor {
    fn default() -> Self {
        ScheduleDescriptor {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            loss_weight: DEFAULT_LOSS_WEIGHT,
        }
    }
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)?.with_weight(self.loss_weight)
    }

    /// One-line form stored in checkpoint headers.
    pub fn describe(&self) -> String {
        format!(
            "vp steps={} beta_min={:?} beta_max={:?} loss_weight={:?}",
            self.steps, self.beta_min, self.beta_max, self.loss_weight
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed schedule descriptor '{text}'"));
        let mut parts = text.split_whitespace();
        if parts.next() != Some("vp") {
            return Err(bad());
        }
        let mut d = ScheduleDescriptor::default();
        let mut seen = 0;
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "steps" => d.steps = v.parse().map_err(|_| bad())?,
                "beta_min" => d.beta_min = v.parse().map_err(|_| bad())?,
                "beta_max" => d.beta_max = v.parse().map_err(|_| bad())?,
                "loss_weight" => d.loss_weight = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 4 {
            return Err(bad());
        }
        Ok(d)
    }
}

/// Linearly spaced betas, `alpha_t = sqrt(prod(1 - beta))`, `sigma_t = sqrt(1 - alpha_t^2)`
/// and unit loss weights.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "schedule betas must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok(NoiseSchedule {
        betas,
        alpha_bar,
        alpha,
        sigma,
        weight: vec![1.0; steps],
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.steps());
        t - 1
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.idx(t)]
        }
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weight[self.idx(t)]
    }

    /// Replaces every loss weight by `w`.
    pub fn with_weight(mut self, w: f64) -> Result<Self> {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("loss weight {w} must be positive")));
        }
        self.weight.fill(w);
        Ok(self)
    }
}

/// `alpha_t * x + sigma_t * eps`.
pub fn forward_noise(x: Point, t: usize, eps: Point, schedule: &NoiseSchedule) -> Result<Point> {
    schedule.check_step(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok([a * x[0] + s * eps[0], a * x[1] + s * eps[1]])
}
