mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use resalign::adapt::FinetuneConfig;
use resalign::autodiff::{Objective, ParamVector, Quadratic};
use resalign::experiment::RunConfig;
use resalign::hypergrad::{
    dense_solve, dense_solve_oracle, get_hypergrad, richardson, unrolled_grad, unrolled_grad_oracle,
    HypergradSettings, IterationForm, ROUNDOFF_FLOOR,
};
use resalign::objectives::FtLossKind;

/// Random SPD matrix whose eigenvalues, scaled by `gamma`, lie in [0.1, 0.9].
fn spd(d: usize, gamma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = common::rng(seed);
    let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    let q = a.qr().q();
    let eig = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| rng.random_range(0.1..0.9) / gamma));
    let h = &q * eig * q.transpose();
    (0..d).map(|i| (0..d).map(|j| 0.5 * (h[(i, j)] + h[(j, i)])).collect()).collect()
}

fn solve(h: &[Vec<f64>], g: &ParamVector, settings: &HypergradSettings) -> resalign::hypergrad::HypergradResult {
    let q = Quadratic::new(h.to_vec(), vec![0.0; g.dim()], 0.0).unwrap();
    let at = ParamVector::zeros(g.dim());
    richardson(|v| q.hvp(&at, v), g, settings).unwrap()
}

fn settings(gamma: f64, k: usize, form: IterationForm) -> HypergradSettings {
    HypergradSettings {
        gamma,
        iterations: k,
        form,
        ..HypergradSettings::default()
    }
}

#[test]
fn richardson_matches_dense_solve_on_random_spd_systems() {
    for seed in 0..20u64 {
        let d = 5 + (seed as usize * 7) % 46;
        let gamma = [0.3, 1.0, 2.5][seed as usize % 3];
        let h = spd(d, gamma, seed);
        let g = common::gaussian_vector(&mut common::rng(seed + 100), d, 1.0);
        let r = solve(&h, &g, &settings(gamma, 200, IterationForm::Proximal));
        let exact = dense_solve_oracle(&h, &g, gamma).unwrap();
        assert!(!r.diverged, "seed {seed}");
        assert!(common::rel_norm_err(&r.x, &exact) <= 1e-6, "seed {seed}");
        let floor = ROUNDOFF_FLOOR * r.residuals[0];
        for w in r.residuals.windows(2) {
            assert!(w[1] <= w[0] || w[1] <= floor, "seed {seed}: residual rose {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn shifted_form_converges_to_the_shifted_system() {
    for seed in 0..10u64 {
        let d = 20;
        let gamma = 2.0;
        // (gamma I + H) x = g iterates with matrix H / gamma; keep its radius below 1.
        let h = spd(d, 1.0 / gamma, seed);
        let g = common::gaussian_vector(&mut common::rng(seed + 7), d, 1.0);
        let r = solve(&h, &g, &settings(gamma, 400, IterationForm::Shifted));
        let shifted = dense_solve(&h, &g, gamma, IterationForm::Shifted).unwrap();
        let proximal = dense_solve_oracle(&h, &g, gamma).unwrap();
        assert!(common::rel_norm_err(&r.x, &shifted) <= 1e-6);
        assert!(common::rel_norm_err(&r.x, &proximal) > 1e-2);
    }
}

#[test]
fn forms_coincide_at_unit_gamma() {
    for seed in 0..5u64 {
        let h = spd(30, 1.0, seed);
        let g = common::gaussian_vector(&mut common::rng(seed), 30, 1.0);
        let a = solve(&h, &g, &settings(1.0, 50, IterationForm::Proximal));
        let b = solve(&h, &g, &settings(1.0, 50, IterationForm::Shifted));
        assert!(a.x.max_abs_diff(&b.x) <= 1e-10);
    }
}

#[test]
fn dense_oracle_residual_is_tiny() {
    let h = spd(50, 1.0, 3);
    let g = common::gaussian_vector(&mut common::rng(4), 50, 1.0);
    let x = dense_solve_oracle(&h, &g, 1.0).unwrap();
    let q = Quadratic::new(h, vec![0.0; 50], 0.0).unwrap();
    let mut lhs = q.hvp(&ParamVector::zeros(50), &x).unwrap();
    lhs.axpy(1.0, &x);
    assert!(lhs.sub(&g).norm() < 1e-10);
}

#[test]
fn unrolled_single_step_at_zero_lr_is_the_plain_gradient() {
    let q = Quadratic::diagonal(&[1.0, 2.0]).with_linear(vec![0.5, -1.0]);
    let harmful = Quadratic::diagonal(&[3.0, 0.5]).with_linear(vec![1.0, 1.0]);
    let theta = ParamVector::new(vec![0.3, -0.7]);
    let got = unrolled_grad(&theta, 0.0, 1, |_| Ok(q.clone()), &harmful).unwrap();
    assert_eq!(got, harmful.grad(&theta).unwrap());
}

#[test]
fn unrolled_quadratic_matches_closed_form() {
    let (ha, hb) = ([0.5, 2.0, 1.0], [1.5, 0.2, 4.0]);
    let lin_a = vec![0.1, -0.2, 0.3];
    let lin_b = vec![1.0, -1.0, 0.5];
    let ft = Quadratic::diagonal(&ha).with_linear(lin_a.clone());
    let harmful = Quadratic::diagonal(&hb).with_linear(lin_b.clone());
    let theta = [0.4, -0.3, 0.9];
    let lr = 0.1;
    let got = unrolled_grad(&ParamVector::new(theta.to_vec()), lr, 3, |_| Ok(ft.clone()), &harmful).unwrap();
    for i in 0..3 {
        let mut x = theta[i];
        for _ in 0..3 {
            x -= lr * (ha[i] * x + lin_a[i]);
        }
        let expected = (1.0 - lr * ha[i]).powi(3) * (hb[i] * x + lin_b[i]);
        assert!((got[i] - expected).abs() < 1e-10, "{i}: {} vs {expected}", got[i]);
    }
}

#[test]
fn implicit_and_unrolled_gradients_align_on_a_reduced_denoiser() {
    let mut hits = 0;
    for seed in 1..=5u64 {
        let (config, tb, base) = reduced(seed);
        let d_ft = &tb.pool.finetune_pool[..50];
        let ft = FinetuneConfig::sgd(1e-3, 10, 16, seed);
        let unrolled = unrolled_grad_oracle(&tb, &base, d_ft, &ft, seed).unwrap();
        let theta_ft = resalign::adapt::adapt(&tb, &base, d_ft, &ft).unwrap();
        let implicit =
            get_hypergrad(&tb, &base, &theta_ft, d_ft, FtLossKind::Standard, &config.unlearn.hypergrad, seed).unwrap();
        if implicit.x.cosine(&unrolled) >= 0.8 {
            hits += 1;
        }
    }
    assert!(hits >= 4, "{hits}/5 seeds aligned");
}

fn reduced(seed: u64) -> (RunConfig, resalign::objectives::Testbed, ParamVector) {
    let mut config = common::small_config(seed);
    config.model = resalign::diffusion::Architecture::with_hidden(16);
    let outcome = resalign::experiment::commands::train_base(&config, "reduced").unwrap();
    let tb = config.testbed(outcome.params.clone()).unwrap();
    (config, tb, outcome.params)
}

#[test]
fn hypergradient_is_seeded() {
    let (config, tb, base) = common::small_testbed(6);
    let d_ft = &tb.pool.finetune_pool[..30];
    let s = &config.unlearn.hypergrad;
    let a = get_hypergrad(&tb, &base, &base, d_ft, FtLossKind::Standard, s, 3).unwrap();
    let b = get_hypergrad(&tb, &base, &base, d_ft, FtLossKind::Standard, s, 3).unwrap();
    assert!(a.x.bit_eq(&b.x));
    assert!(get_hypergrad(&tb, &base, &base, &[], FtLossKind::Standard, s, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn contractive_diagonal_systems_converge(diag in prop::collection::vec(0.0f64..0.9, 1..12), seed in 0u64..1000) {
        let g = common::gaussian_vector(&mut common::rng(seed), diag.len(), 1.0);
        let q = Quadratic::diagonal(&diag);
        let at = ParamVector::zeros(diag.len());
        let r = richardson(|v| q.hvp(&at, v), &g, &settings(1.0, 300, IterationForm::Proximal)).unwrap();
        for i in 0..diag.len() {
            prop_assert!((r.x[i] - g[i] / (1.0 + diag[i])).abs() < 1e-9);
        }
    }
}
