use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{forward_noise, LabeledSample, NoisePredictor, NoiseSchedule, Point};
use crate::autodiff::{Graph, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::seeds;

/// Timesteps and Gaussian noise drawn for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub t: Vec<usize>,
    pub eps: Vec<Point>,
}

impl NoiseDraws {
    /// Per element: `t` uniform on `1..=T`, then a standard normal pair.
    pub fn draw<R: Rng>(n: usize, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(rng.random_range(1..=schedule.steps()));
            eps.push([rng.sample(StandardNormal), rng.sample(StandardNormal)]);
        }
        NoiseDraws { t, eps }
    }

    pub fn seeded(n: usize, schedule: &NoiseSchedule, seed: u64) -> Self {
        NoiseDraws::draw(n, schedule, &mut seeds::rng(seed))
    }

    pub fn eps_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.eps.len(), 2), |(i, j)| self.eps[i][j])
    }
}

/// Adds the weighted noise-prediction error for `batch` under `draws` to `g`
/// and returns the scalar node.
pub fn denoise_term(
    g: &mut GraphBuilder,
    predictor: &dyn NoisePredictor,
    batch: &[LabeledSample],
    schedule: &NoiseSchedule,
    draws: &NoiseDraws,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Usage("denoising loss over an empty batch".into()));
    }
    if draws.t.len() != batch.len() {
        return Err(Error::Usage("noise draws do not match the batch".into()));
    }
    let n = batch.len();
    let mut x_t = Array2::zeros((n, 2));
    for (i, s) in batch.iter().enumerate() {
        let noisy = forward_noise(s.x, draws.t[i], draws.eps[i], schedule)?;
        x_t[[i, 0]] = noisy[0];
        x_t[[i, 1]] = noisy[1];
    }
    let concepts: Vec<usize> = batch.iter().map(|s| s.concept).collect();
    let pred = predictor.build(g, x_t, &draws.t, &concepts)?;
    let target = g.constant(draws.eps_matrix());
    let weights = draws.t.iter().map(|&t| schedule.weight(t)).collect();
    g.weighted_mse(pred, target, weights)
}

/// Mean over the batch of `w_t * ||eps_hat(alpha_t x + sigma_t eps, p, t) - eps||^2`
/// for draws fixed by `seed`.
pub fn denoise_loss(
    predictor: &dyn NoisePredictor,
    batch: &[LabeledSample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Graph> {
    let draws = NoiseDraws::seeded(batch.len(), schedule, seed);
    denoise_loss_with(predictor, batch, schedule, &draws)
}

pub fn denoise_loss_with(
    predictor: &dyn NoisePredictor,
    batch: &[LabeledSample],
    schedule: &NoiseSchedule,
    draws: &NoiseDraws,
) -> Result<Graph> {
    let mut g = GraphBuilder::new(predictor.param_count());
    let out = denoise_term(&mut g, predictor, batch, schedule, draws)?;
    g.build(out)
}
