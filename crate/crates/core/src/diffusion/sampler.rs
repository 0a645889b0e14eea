use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{predict, NoisePredictor, NoiseSchedule, Point};
use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::seeds;

/// Ancestral sampling from `t = T` down to `t = 1`, one row per requested
/// concept label. Starts at standard Gaussian noise and adds posterior-variance
/// noise on every step except the last.
pub fn sample_labels(
    predictor: &dyn NoisePredictor,
    params: &ParamVector,
    concepts: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Point>> {
    if let Some(&bad) = concepts.iter().find(|&&c| c >= predictor.num_concepts()) {
        return Err(Error::Usage(format!("unknown concept {bad}")));
    }
    let n = concepts.len();
    let mut rng = seeds::rng(seed);
    let mut x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = predict(predictor, params, x.clone(), &vec![t; n], concepts)?;
        let beta = schedule.beta(t);
        let coef = beta / schedule.sigma(t);
        let inv_sqrt = 1.0 / (1.0 - beta).sqrt();
        let noise_std = if t > 1 {
            (beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))).sqrt()
        } else {
            0.0
        };
        for i in 0..n {
            for j in 0..2 {
                let mean = inv_sqrt * (x[[i, j]] - coef * eps_hat[[i, j]]);
                let z: f64 = if t > 1 { rng.sample(StandardNormal) } else { 0.0 };
                x[[i, j]] = mean + noise_std * z;
            }
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite points".into()));
    }
    Ok(x.rows().into_iter().map(|r| [r[0], r[1]]).collect())
}

pub fn sample(
    predictor: &dyn NoisePredictor,
    params: &ParamVector,
    concept: usize,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::Usage("sample count must be at least 1".into()));
    }
    sample_labels(predictor, params, &vec![concept; n], schedule, seed)
}
