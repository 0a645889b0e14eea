mod common;

use ndarray::Array2;
use proptest::prelude::*;
use resalign::adapt::{train_base, PretrainSettings};
use resalign::autodiff::{GraphBuilder, NodeId, Objective};
use resalign::diffusion::{
    denoise_loss, forward_noise, make_schedule, sample, Architecture, ConceptSet, ConceptSpec, LabeledSample, NoiseDraws,
    NoisePredictor, ScheduleDescriptor,
};
use resalign::Result;

/// Predictor test double that ignores its inputs and emits a fixed matrix.
struct Fixed(Array2<f64>);

impl NoisePredictor for Fixed {
    fn param_count(&self) -> usize {
        1
    }

    fn num_concepts(&self) -> usize {
        10
    }

    fn build(&self, g: &mut GraphBuilder, _x: Array2<f64>, _t: &[usize], _c: &[usize]) -> Result<NodeId> {
        Ok(g.constant(self.0.clone()))
    }
}

fn batch(n: usize) -> Vec<LabeledSample> {
    (0..n)
        .map(|i| LabeledSample {
            x: [i as f64 * 0.1, -0.3],
            concept: i % 10,
        })
        .collect()
}

#[test]
fn default_schedule_matches_direct_product() {
    let s = make_schedule(50, 1e-4, 0.2).unwrap();
    let mut prod = 1.0;
    for k in 0..50 {
        prod *= 1.0 - (1e-4 + (0.2 - 1e-4) * k as f64 / 49.0);
    }
    assert!((s.alpha(50) - prod.sqrt()).abs() < 1e-15);
    assert!((s.sigma(50) - (1.0 - prod).sqrt()).abs() < 1e-15);
}

#[test]
fn forward_noise_mid_schedule_by_hand() {
    let s = make_schedule(50, 1e-4, 0.2).unwrap();
    let mut prod = 1.0;
    for k in 0..25 {
        prod *= 1.0 - (1e-4 + (0.2 - 1e-4) * k as f64 / 49.0);
    }
    let x = forward_noise([1.0, 0.0], 25, [0.0, 1.0], &s).unwrap();
    assert!((x[0] - prod.sqrt()).abs() < 1e-15);
    assert!((x[1] - (1.0 - prod).sqrt()).abs() < 1e-15);
}

#[test]
fn perfect_predictor_has_zero_loss() {
    let s = ScheduleDescriptor::default().build().unwrap();
    let b = batch(7);
    let draws = NoiseDraws::seeded(b.len(), &s, 11);
    let rigged = Fixed(draws.eps_matrix());
    let loss = denoise_loss(&rigged, &b, &s, 11).unwrap();
    assert_eq!(loss.value(&resalign::autodiff::ParamVector::zeros(1)).unwrap(), 0.0);
}

#[test]
fn zero_predictor_loss_is_weighted_noise_energy() {
    let s = make_schedule(50, 1e-4, 0.2).unwrap().with_weight(0.5).unwrap();
    let b = batch(9);
    let draws = NoiseDraws::seeded(b.len(), &s, 4);
    let expected = draws
        .eps
        .iter()
        .zip(&draws.t)
        .map(|(e, &t)| s.weight(t) * (e[0] * e[0] + e[1] * e[1]))
        .sum::<f64>()
        / b.len() as f64;
    let loss = denoise_loss(&Fixed(Array2::zeros((9, 2))), &b, &s, 4).unwrap();
    let got = loss.value(&resalign::autodiff::ParamVector::zeros(1)).unwrap();
    assert!((got - expected).abs() < 1e-14 * expected.abs().max(1.0), "{got} vs {expected}");
}

#[test]
fn sampling_is_deterministic_and_spread() {
    let arch = Architecture::with_hidden(16);
    let s = ScheduleDescriptor::default().build().unwrap();
    let p = arch.init(3);
    let a = sample(&arch, &p, 2, &s, 1, 8).unwrap();
    let b = sample(&arch, &p, 2, &s, 1, 8).unwrap();
    assert_eq!(a, b);
    let pts = sample(&arch, &p, 2, &s, 200, 9).unwrap();
    let mean = pts.iter().map(|x| x[0]).sum::<f64>() / 200.0;
    let var = pts.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / 199.0;
    assert!(var > 0.0);
}

#[test]
fn trained_single_mode_model_samples_near_its_center() {
    let c = [0.8, -0.6];
    let concepts = ConceptSet::new(
        vec![ConceptSpec {
            id: 0,
            mode_centers: vec![c],
            mode_weights: vec![1.0],
            is_harmful: false,
        }],
        0.05,
    )
    .unwrap();
    let data = concepts.generate(&[0], 500, 1).unwrap();
    let arch = Architecture {
        num_concepts: 1,
        ..Architecture::default()
    };
    let s = ScheduleDescriptor::default().build().unwrap();
    let settings = PretrainSettings {
        steps: 2000,
        ..PretrainSettings::default()
    };
    let p = train_base(&arch, &s, &data, &settings, 5, &mut |_, _| Ok(())).unwrap();
    let pts = sample(&arch, &p, 0, &s, 500, 6).unwrap();
    let m = [
        pts.iter().map(|x| x[0]).sum::<f64>() / 500.0,
        pts.iter().map(|x| x[1]).sum::<f64>() / 500.0,
    ];
    let dist = ((m[0] - c[0]).powi(2) + (m[1] - c[1]).powi(2)).sqrt();
    assert!(dist < 0.5, "sample mean {m:?} is {dist} from {c:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn schedules_preserve_variance(steps in 1usize..80, lo in 1e-5f64..0.05, span in 0.0f64..0.4) {
        let s = make_schedule(steps, lo, lo + span).unwrap();
        for t in 1..=steps {
            prop_assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn denoising_loss_is_non_negative(seed in 0u64..1000, n in 1usize..12) {
        let arch = Architecture::with_hidden(6);
        let s = ScheduleDescriptor::default().build().unwrap();
        let loss = denoise_loss(&arch, &batch(n), &s, seed).unwrap();
        prop_assert!(loss.value(&arch.init(seed)).unwrap() >= 0.0);
    }
}
