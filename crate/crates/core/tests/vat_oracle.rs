use assl::baselines::{vat_adversarial_direction, vat_loss, vat_loss_with_perturbation, VatConfig};
use assl::models::{ModelBundle, ModelConfig};
use ndarray::Array3;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn jittered_bundle(seed: u64) -> ModelBundle {
    let mut bundle = ModelBundle::new(ModelConfig::scaled(1, 2, 4), seed).unwrap();
    let mut rng = assl::seed::rng(seed, &[1]);
    for id in bundle.params.ids().collect::<Vec<_>>() {
        bundle.params.get_mut(id).mapv_inplace(|w| w + 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    bundle
}

fn unit(rng: &mut impl Rng) -> Array3<f64> {
    let v = Array3::from_shape_fn((1, 1, 3), |_| rng.sample::<f64, _>(StandardNormal));
    let n = v.mapv(|x| x * x).sum().sqrt();
    v / n
}

fn cosine(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    dot / (a.mapv(|x| x * x).sum().sqrt() * b.mapv(|x| x * x).sum().sqrt())
}

#[test]
fn power_iteration_finds_the_most_sensitive_direction() {
    for seed in 0..5 {
        let bundle = jittered_bundle(seed);
        let mut rng = assl::seed::rng(seed, &[2]);
        let x = Array3::from_shape_fn((1, 1, 3), |_| rng.random_range(-1.0..1.0));
        let radius = 1e-3;
        let mut best = (f64::NEG_INFINITY, unit(&mut rng));
        for _ in 0..1000 {
            let r = unit(&mut rng);
            let kl = vat_loss_with_perturbation(&bundle, &x, &r.mapv(|v| v * radius)).unwrap();
            if kl > best.0 {
                best = (kl, r);
            }
        }
        let init = unit(&mut rng);
        let d = vat_adversarial_direction(&bundle, &x, &init, 1e-6, 1).unwrap();
        assert!((d.mapv(|v| v * v).sum().sqrt() - 1.0).abs() < 1e-12);
        let cos = cosine(&d, &best.1).abs();
        assert!(cos > 0.9, "seed {seed}: |cos| = {cos}");
    }
}

#[test]
fn zero_radius_gives_zero_loss() {
    let bundle = jittered_bundle(3);
    let x = Array3::from_elem((4, 1, 3), 0.3);
    let cfg = VatConfig { epsilon: 0.0, ..VatConfig::default() };
    assert_eq!(vat_loss(&bundle, &x, cfg, 0).unwrap(), 0.0);
}

#[test]
fn invalid_settings_are_rejected() {
    let bundle = jittered_bundle(3);
    let x = Array3::from_elem((2, 1, 3), 0.3);
    assert!(vat_loss(&bundle, &x, VatConfig { power_iters: 0, ..VatConfig::default() }, 0).is_err());
    assert!(vat_loss(&bundle, &x, VatConfig { xi: 0.0, ..VatConfig::default() }, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_non_negative(seed in 0u64..1000, eps in 0.0f64..5.0) {
        let bundle = jittered_bundle(seed % 4);
        let mut rng = assl::seed::rng(seed, &[3]);
        let x = Array3::from_shape_fn((3, 1, 3), |_| rng.random_range(-1.0..1.0));
        let l = vat_loss(&bundle, &x, VatConfig { epsilon: eps, ..VatConfig::default() }, seed).unwrap();
        prop_assert!(l >= -1e-15);
    }

    #[test]
    fn direction_is_unit_norm_for_any_start_scale(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let bundle = jittered_bundle(1);
        let mut rng = assl::seed::rng(seed, &[4]);
        let x = Array3::from_shape_fn((2, 1, 3), |_| rng.random_range(-1.0..1.0));
        let init = Array3::from_shape_fn((2, 1, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let a = vat_adversarial_direction(&bundle, &x, &init, 1e-6, 1).unwrap();
        let b = vat_adversarial_direction(&bundle, &x, &init.mapv(|v| v * scale), 1e-6, 1).unwrap();
        prop_assert!((a.mapv(|v| v * v).sum().sqrt() - 1.0).abs() < 1e-9);
        prop_assert!(cosine(&a, &b) > 1.0 - 1e-6);
    }
}
