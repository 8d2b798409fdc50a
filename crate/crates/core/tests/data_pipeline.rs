use assl::data::{
    generate_synthetic, holdout, load_dataset, make_split, sample_indices, write_dataset, SkeletonSequence,
    SyntheticConfig,
};
use ndarray::Array3;
use proptest::prelude::*;

fn trajectory_statistics(x: &Array3<f64>) -> Vec<f64> {
    let (t, j, _) = x.dim();
    let mut feats = Vec::new();
    for joint in 0..j {
        let ys: Vec<f64> = (0..t).map(|f| x[[f, joint, 1]]).collect();
        let rs: Vec<f64> = (0..t).map(|f| x[[f, joint, 0]].hypot(x[[f, joint, 2]])).collect();
        let steps: Vec<f64> = (1..t)
            .map(|f| (0..3).map(|a| (x[[f, joint, a]] - x[[f - 1, joint, a]]).powi(2)).sum::<f64>().sqrt())
            .collect();
        for series in [&ys, &rs, &steps] {
            let n = series.len() as f64;
            let mean = series.iter().sum::<f64>() / n;
            let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            feats.push(mean);
            feats.push(std);
        }
    }
    feats
}

fn nearest_centroid_accuracy(data: &[SkeletonSequence], classes: usize) -> f64 {
    let feats: Vec<Vec<f64>> = data.iter().map(|s| trajectory_statistics(&s.frames)).collect();
    let dim = feats[0].len();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0.0; classes];
    for (f, s) in feats.iter().zip(data) {
        let c = s.label.unwrap();
        counts[c] += 1.0;
        for (acc, v) in centroids[c].iter_mut().zip(f) {
            *acc += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let correct = feats
        .iter()
        .zip(data)
        .filter(|(f, s)| {
            let dist = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == s.label.unwrap()
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn low_noise_classes_are_separable_by_nearest_centroid() {
    let cfg = SyntheticConfig { classes: 6, joints: 8, frames: 60, samples_per_class: 50, noise_scale: 0.01, seed: 3, ..SyntheticConfig::default() };
    let data = generate_synthetic(&cfg).unwrap();
    let acc = nearest_centroid_accuracy(&data, 6);
    assert!(acc > 0.9, "nearest-centroid train accuracy {acc}");
}

#[test]
fn write_then_load_reproduces_every_coordinate() {
    let cfg = SyntheticConfig { samples_per_class: 5, noise_scale: 0.2, seed: 17, ..SyntheticConfig::default() };
    let data = generate_synthetic(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_dataset(&path, &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.frames.dim(), b.frames.dim());
        assert!(a.frames.iter().zip(b.frames.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = SyntheticConfig { samples_per_class: 3, ..SyntheticConfig::default() };
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a[0].frames, c[0].frames);
}

/// Horizontal angle of joint `j` in frame 0; at t = 0 the pose does not
/// depend on the speed factor.
fn first_frame_angle(s: &SkeletonSequence, j: usize) -> f64 {
    s.frames[[0, j, 2]].atan2(s.frames[[0, j, 0]])
}

fn wrapped(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

#[test]
fn rotation_stays_within_the_configured_range() {
    let base = SyntheticConfig { classes: 2, samples_per_class: 40, noise_scale: 0.0, ..SyntheticConfig::default() };
    let fixed = generate_synthetic(&SyntheticConfig { max_rotation_degrees: 0.0, ..base.clone() }).unwrap();
    for s in fixed.iter().filter(|s| s.label == Some(0)) {
        let reference = &fixed[0].frames;
        assert_eq!(s.frames.index_axis(ndarray::Axis(0), 0), reference.index_axis(ndarray::Axis(0), 0));
    }
    for limit in [30.0f64, 180.0] {
        let data = generate_synthetic(&SyntheticConfig { max_rotation_degrees: limit, ..base.clone() }).unwrap();
        let mut widest = 0.0f64;
        for (s, r) in data.iter().zip(&fixed) {
            let delta = wrapped(first_frame_angle(r, 1) - first_frame_angle(s, 1)).abs().to_degrees();
            assert!(delta <= limit + 1e-9, "rotation {delta} exceeds {limit}");
            widest = widest.max(delta);
        }
        assert!(widest > 0.8 * limit, "rotations span only {widest} of {limit} degrees");
    }
    let bad = SyntheticConfig { max_rotation_degrees: 181.0, ..base };
    assert!(generate_synthetic(&bad).is_err());
}

#[test]
fn standard_corpus_holdout_sizes() {
    let cfg = SyntheticConfig { samples_per_class: 150, ..SyntheticConfig::default() };
    let data = generate_synthetic(&cfg).unwrap();
    let (train, test) = holdout(&data, 1.0 / 3.0, 0).unwrap();
    assert_eq!((train.len(), test.len()), (600, 300));
    let split = make_split(&train, 0.1, 0).unwrap().with_test(test).unwrap();
    assert_eq!(split.labeled().len(), 60);
    assert_eq!(split.unlabeled().len(), 540);
    assert!(split.unlabeled().iter().all(|s| s.label.is_none()));
    let truth = split.evaluation_labels();
    assert!(split.unlabeled().iter().all(|s| truth.get(&s.id).is_some()));
}

proptest! {
    #[test]
    fn sampled_indices_are_non_decreasing_and_in_range(available in 1usize..80, target in 1usize..80, seed in any::<u64>()) {
        let mut rng = assl::seed::rng(seed, &[]);
        let idx = sample_indices(available, target, &mut rng);
        prop_assert_eq!(idx.len(), target);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < available));
        if target <= available {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn splits_partition_the_corpus(per_class in 2usize..12, classes in 2usize..5, fraction in 0.3f64..1.0, seed in any::<u64>()) {
        let data: Vec<SkeletonSequence> = (0..per_class * classes)
            .map(|i| SkeletonSequence::new(format!("s{i}"), Array3::zeros((2, 1, 3)), Some(i % classes)).unwrap())
            .collect();
        let split = make_split(&data, fraction, seed).unwrap();
        prop_assert_eq!(split.labeled().len() + split.unlabeled().len(), data.len());
        for c in 0..classes {
            let n = split.labeled().iter().filter(|s| s.label == Some(c)).count();
            prop_assert_eq!(n, (fraction * per_class as f64).round() as usize);
        }
    }
}
