use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, Objective, ParamVector};
use crate::diffusion::{
    denoise_term, forward_noise, predict, ConceptSet, LabeledSample, NoiseDraws, NoisePredictor,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::seeds;

/// `size` samples drawn without replacement when possible, with replacement otherwise.
pub fn draw_batch<R: Rng>(samples: &[LabeledSample], size: usize, rng: &mut R) -> Result<Vec<LabeledSample>> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot draw a batch from an empty set".into()));
    }
    if size <= samples.len() {
        Ok(rand::seq::index::sample(rng, samples.len(), size)
            .into_iter()
            .map(|i| samples[i])
            .collect())
    } else {
        Ok((0..size)
            .map(|_| samples[rng.random_range(0..samples.len())])
            .collect())
    }
}

/// Negated denoising loss on harmful samples, floored at `-clamp_max`.
///
/// Below the floor the value is pinned and the gradient and curvature vanish.
#[derive(Clone, Debug)]
pub struct HarmfulLoss {
    graph: Graph,
    floor: f64,
}

impl HarmfulLoss {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

impl Objective for HarmfulLoss {
    fn dim(&self) -> usize {
        self.graph.dim()
    }

    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.graph.eval_loss(params)?.max(self.floor))
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (v, g) = self.graph.value_and_grad(params)?;
        if v < self.floor {
            Ok((self.floor, ParamVector::zeros(g.dim())))
        } else {
            Ok((v, g))
        }
    }

    fn hvp(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        if self.graph.eval_loss(params)? < self.floor {
            return Ok(ParamVector::zeros(v.dim()));
        }
        self.graph.hvp(params, v)
    }
}

pub fn harmful_loss(
    predictor: &dyn NoisePredictor,
    batch: &[LabeledSample],
    concepts: &ConceptSet,
    schedule: &NoiseSchedule,
    seed: u64,
    clamp_max: f64,
) -> Result<HarmfulLoss> {
    if let Some(s) = batch.iter().find(|s| !concepts.is_harmful(s.concept)) {
        return Err(Error::Usage(format!(
            "harmful batch contains non-harmful concept {}",
            s.concept
        )));
    }
    let draws = NoiseDraws::seeded(batch.len(), schedule, seed);
    let mut g = GraphBuilder::new(predictor.param_count());
    let term = denoise_term(&mut g, predictor, batch, schedule, &draws)?;
    let out = g.scale(term, -1.0)?;
    Ok(HarmfulLoss {
        graph: g.build(out)?,
        floor: -clamp_max,
    })
}

/// Distillation toward the frozen original: mean of `w_t ||eps_theta - eps_orig||^2`
/// where the clean point comes from the original model's cached generations.
pub fn preserve_loss(
    predictor: &dyn NoisePredictor,
    original: &ParamVector,
    generations: &[LabeledSample],
    schedule: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<Graph> {
    if original.dim() != predictor.param_count() {
        return Err(Error::Config(format!(
            "frozen original has {} parameters, model has {}",
            original.dim(),
            predictor.param_count()
        )));
    }
    let mut rng = seeds::rng(seed);
    let batch = draw_batch(generations, batch_size, &mut rng)?;
    let draws = NoiseDraws::draw(batch.len(), schedule, &mut rng);
    let n = batch.len();
    let mut x_t = Array2::zeros((n, 2));
    for (i, s) in batch.iter().enumerate() {
        let noisy = forward_noise(s.x, draws.t[i], draws.eps[i], schedule)?;
        x_t[[i, 0]] = noisy[0];
        x_t[[i, 1]] = noisy[1];
    }
    let concepts: Vec<usize> = batch.iter().map(|s| s.concept).collect();
    let target = predict(predictor, original, x_t.clone(), &draws.t, &concepts)?;
    let mut g = GraphBuilder::new(predictor.param_count());
    let pred = predictor.build(&mut g, x_t, &draws.t, &concepts)?;
    let target = g.constant(target);
    let weights = draws.t.iter().map(|&t| schedule.weight(t)).collect();
    let out = g.weighted_mse(pred, target, weights)?;
    g.build(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FtLossKind {
    Standard,
    PriorPreservation,
}

/// Auxiliary samples and weight for the prior-preserving fine-tuning loss.
#[derive(Clone, Copy, Debug)]
pub struct PriorPreservation<'a> {
    pub samples: &'a [LabeledSample],
    pub weight: f64,
}

/// Denoising loss on `batch`; the prior-preserving kind adds `weight` times the
/// same loss on an equally sized batch of the original model's generations.
pub fn ft_loss(
    predictor: &dyn NoisePredictor,
    batch: &[LabeledSample],
    schedule: &NoiseSchedule,
    kind: FtLossKind,
    prior: Option<PriorPreservation<'_>>,
    seed: u64,
) -> Result<Graph> {
    let mut rng = seeds::rng(seed);
    let draws = NoiseDraws::draw(batch.len(), schedule, &mut rng);
    let mut g = GraphBuilder::new(predictor.param_count());
    let main = denoise_term(&mut g, predictor, batch, schedule, &draws)?;
    let out = match kind {
        FtLossKind::Standard => main,
        FtLossKind::PriorPreservation => {
            let prior = prior.ok_or_else(|| {
                Error::Usage("prior-preserving loss needs auxiliary samples".into())
            })?;
            if prior.weight == 0.0 {
                main
            } else {
                let aux = draw_batch(prior.samples, batch.len(), &mut rng)?;
                let aux_draws = NoiseDraws::draw(aux.len(), schedule, &mut rng);
                let aux_term = denoise_term(&mut g, predictor, &aux, schedule, &aux_draws)?;
                g.scalar_sum(&[(main, 1.0), (aux_term, prior.weight)], 0.0)?
            }
        }
    };
    g.build(out)
}
