#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use resalign::autodiff::{Graph, GraphBuilder, Objective, ParamBlock, ParamVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Random straight-line program mixing every primitive. Returns the graph and a
/// parameter point of matching dimension; the dimension stays at most 200.
pub fn random_graph(seed: u64) -> (Graph, ParamVector) {
    let mut r = rng(seed);
    let rows = r.random_range(2..=5);
    let in_cols = r.random_range(2..=4);
    // Lay out blocks first, then build against the final dimension.
    let layers = r.random_range(1..=3);
    let mut plan = Vec::new();
    let mut offset = 0;
    let mut width = in_cols;
    for _ in 0..layers {
        let extra = if r.random_bool(0.4) { r.random_range(1..=2) } else { 0 };
        let extra_block = ParamBlock::new(offset, rows, extra);
        offset += extra_block.len();
        let fan_in = width + extra;
        let out = r.random_range(2..=5);
        let w = ParamBlock::new(offset, out, fan_in);
        offset += w.len();
        let bias = if r.random_bool(0.7) {
            let b = offset;
            offset += out;
            Some(b)
        } else {
            None
        };
        let act = r.random_range(0..3);
        plan.push((extra, extra_block, w, bias, act));
        width = out;
    }
    let side = ParamBlock::new(offset, 1, r.random_range(1..=3));
    offset += side.len();
    let dim = offset;
    assert!(dim <= 200, "random graph too large: {dim}");

    let mut g = GraphBuilder::new(dim);
    let mut h = g.constant(gaussian_matrix(&mut r, rows, in_cols, 1.0));
    for (extra, extra_block, w, bias, act) in plan {
        if extra > 0 {
            let p = g.param(extra_block).unwrap();
            h = g.concat(&[h, p]).unwrap();
        }
        h = g.affine(h, w, bias).unwrap();
        h = match act {
            0 => g.tanh(h).unwrap(),
            1 => g.silu(h).unwrap(),
            _ => h,
        };
    }
    let target = g.constant(gaussian_matrix(&mut r, rows, width, 1.0));
    let weights: Vec<f64> = (0..rows).map(|_| r.random_range(0.5..2.0)).collect();
    let main = g.weighted_mse(h, target, weights).unwrap();
    let sp = g.param(side).unwrap();
    let zero = g.constant(Array2::zeros((1, side.cols)));
    let reg = g.mse(sp, zero).unwrap();
    let out = g
        .scalar_sum(&[(main, r.random_range(0.5..1.5)), (reg, r.random_range(-0.5..0.5))], 0.3)
        .unwrap();
    let graph = g.build(out).unwrap();
    let params = gaussian_vector(&mut r, dim, 0.6);
    (graph, params)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn fd_grad(obj: &dyn Objective, p: &ParamVector, h: f64) -> ParamVector {
    let mut out = ParamVector::zeros(p.dim());
    let mut q = p.clone();
    for i in 0..p.dim() {
        q[i] = p[i] + h;
        let fp = obj.value(&q).unwrap();
        q[i] = p[i] - h;
        let fm = obj.value(&q).unwrap();
        q[i] = p[i];
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

pub fn fd_hvp(obj: &dyn Objective, p: &ParamVector, v: &ParamVector, h: f64) -> ParamVector {
    let mut plus = p.clone();
    plus.axpy(h, v);
    let mut minus = p.clone();
    minus.axpy(-h, v);
    let gp = obj.grad(&plus).unwrap();
    let gm = obj.grad(&minus).unwrap();
    gp.sub(&gm).scaled(1.0 / (2.0 * h))
}

/// Worst per-coordinate relative error, with coordinates below `floor` in both
/// vectors compared absolutely against `floor`.
pub fn worst_rel(a: &ParamVector, b: &ParamVector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

pub fn rel_norm_err(a: &ParamVector, b: &ParamVector) -> f64 {
    a.sub(b).norm() / a.norm().max(b.norm()).max(1e-300)
}


use resalign::diffusion::Architecture;
use resalign::experiment::{commands, RunConfig};
use resalign::objectives::Testbed;

/// Default configuration shrunk to a narrow network and short budgets.
pub fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default().with_seed(seed);
    c.model = Architecture::with_hidden(8);
    c.pretrain.steps = 400;
    c.unlearn.outer_steps = 3;
    c.objectives.generations_per_concept = 16;
    c.attack.steps = 10;
    c.attack.checkpoints = vec![0, 5, 10];
    c.eval.n_samples = 100;
    c.eval.n_probes = 4;
    c
}

/// Small config, its briefly trained base model and the testbed around it.
pub fn small_testbed(seed: u64) -> (RunConfig, Testbed, ParamVector) {
    let config = small_config(seed);
    let base = commands::train_base(&config, "base").unwrap().params;
    let testbed = config.testbed(base.clone()).unwrap();
    (config, testbed, base)
}

/// Denoiser forward pass written out longhand from the architecture's layout.
pub fn reference_eps_hat(arch: &Architecture, p: &ParamVector, x: [f64; 2], t: usize, concept: usize) -> [f64; 2] {
    let l = arch.layout();
    let half = arch.time_dim / 2;
    let mut input = vec![x[0], x[1]];
    let mut cosines = Vec::new();
    for k in 0..half {
        let freq = 200f64.powf(-(k as f64) / half as f64);
        input.push((t as f64 * freq).sin());
        cosines.push((t as f64 * freq).cos());
    }
    input.extend(cosines);
    for r in 0..arch.concept_dim {
        input.push(p[l.embedding.offset + r * arch.num_concepts + concept]);
    }
    let dense = |w: ParamBlock, b: usize, h: &[f64]| -> Vec<f64> {
        (0..w.rows)
            .map(|r| p[b + r] + (0..w.cols).map(|c| p[w.offset + r * w.cols + c] * h[c]).sum::<f64>())
            .collect()
    };
    let silu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|z| z / (1.0 + (-z).exp())).collect() };
    let h1 = silu(dense(l.w1, l.b1, &input));
    let h2 = silu(dense(l.w2, l.b2, &h1));
    let out = dense(l.w3, l.b3, &h2);
    [out[0], out[1]]
}

/// Mean of `w_t ||eps_hat(alpha_t x + sigma_t eps) - eps||^2` with the
/// longhand forward pass.
pub fn reference_denoise(
    arch: &Architecture,
    p: &ParamVector,
    batch: &[resalign::diffusion::LabeledSample],
    s: &resalign::diffusion::NoiseSchedule,
    draws: &resalign::diffusion::NoiseDraws,
) -> f64 {
    let mut total = 0.0;
    for (i, b) in batch.iter().enumerate() {
        let t = draws.t[i];
        let e = draws.eps[i];
        let xt = [s.alpha(t) * b.x[0] + s.sigma(t) * e[0], s.alpha(t) * b.x[1] + s.sigma(t) * e[1]];
        let pred = reference_eps_hat(arch, p, xt, t, b.concept);
        total += s.weight(t) * ((pred[0] - e[0]).powi(2) + (pred[1] - e[1]).powi(2));
    }
    total / batch.len() as f64
}
