use assl::baselines::{random_directions, vat_direction_from, vat_on_tape, VatConfig};
use assl::gradcheck::{check_gradients, loss_term_suite, relative_error, ToyProblem};
use assl::models::ModelBundle;
use assl::nn::{Bound, Group};
use assl::seed;
use assl::tape::{Mat, Tape, Var};

fn tape_gradients(bundle: &ModelBundle, groups: &[Group], f: &dyn Fn(&mut Tape, &Bound) -> Var) -> Vec<Option<Mat>> {
    let mut tape = Tape::new();
    let p = bundle.params.bind(&mut tape, groups);
    let out = f(&mut tape, &p);
    let mut g = tape.backward(out);
    p.gradients(&mut g)
}

fn max_diff(a: &[Option<Mat>], b: &[Option<Mat>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Some(x), Some(y)) => worst = worst.max((x - y).iter().fold(0.0, |m, v| m.max(v.abs()))),
            (Some(x), None) | (None, Some(x)) => worst = worst.max(x.iter().fold(0.0, |m, v| m.max(v.abs()))),
            (None, None) => {}
        }
    }
    worst
}

#[test]
fn every_objective_term_matches_finite_differences() {
    for (name, r) in loss_term_suite(7, 1e-5).unwrap() {
        assert!(r.checked > 0, "{name}");
        assert!(r.max_abs_gradient > 1e-4, "{name} has a degenerate gradient: {r:?}");
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn finite_difference_checks_hold_for_another_draw() {
    for (name, r) in loss_term_suite(1234, 1e-5).unwrap() {
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn relative_error_uses_the_magnitude_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
}

#[test]
fn stop_gradient_matches_a_frozen_centre_target() {
    let toy = ToyProblem::new(2, 3, 5, 8, 3, 4, 11).unwrap();
    let detached = tape_gradients(&toy.bundle, &[Group::Model], &|t, p| toy.neighborhood_kl(t, p, true));
    let full = tape_gradients(&toy.bundle, &[Group::Model], &|t, p| toy.neighborhood_kl(t, p, false));

    // Oracle: same loss with the centre predictions precomputed as plain constants.
    let mut tape = Tape::new();
    let frozen = toy.bundle.params.bind(&mut tape, &[]);
    let hu = {
        let x = tape.constant(toy.unlabeled.clone());
        let h = toy.bundle.encode_on_tape(&mut tape, &frozen, x, toy.steps, 3);
        toy.bundle.translate_on_tape(&mut tape, &frozen, h)
    };
    let nbrs = tape.constant(toy.unlabeled_neighbors.clone());
    let (_, c) = assl::neighborhood::attention_center_on_tape(&toy.bundle, &mut tape, &frozen, hu, nbrs, toy.k);
    let pc = toy.bundle.classify_on_tape(&mut tape, &frozen, c);
    let target = tape.value(pc).clone();
    let oracle = tape_gradients(&toy.bundle, &[Group::Model], &|t, p| {
        let x = t.constant(toy.unlabeled.clone());
        let h = toy.bundle.encode_on_tape(t, p, x, toy.steps, 3);
        let hbar = toy.bundle.translate_on_tape(t, p, h);
        let probs = toy.bundle.classify_on_tape(t, p, hbar);
        let tg = t.constant(target.clone());
        let kl = assl::losses::kl_sum_on_tape(t, tg, probs);
        let pf = t.constant(toy.positives.clone());
        let pp = toy.bundle.classify_on_tape(t, p, pf);
        let tgp = t.gather(tg, &toy.positive_anchor);
        let kl_pos = assl::losses::kl_sum_on_tape(t, tgp, pp);
        let s = t.add(kl, kl_pos);
        t.scale(s, 1.0 / 3.0)
    });
    assert!(max_diff(&detached, &oracle) < 1e-12);
    // The aggregator only influences the loss through the centre target.
    let agg = toy.bundle.params.find("aggregator.0.weight").unwrap();
    assert!(detached[agg.index()].as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert!(full[agg.index()].as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
}

#[test]
fn vat_gradient_treats_the_perturbation_as_fixed() {
    let toy = ToyProblem::new(2, 3, 5, 8, 3, 4, 5).unwrap();
    let cfg = VatConfig::default();
    let mut tape = Tape::new();
    let frozen = toy.bundle.params.bind(&mut tape, &[]);
    let x = tape.constant(toy.unlabeled.clone());
    let probs = assl::baselines::probs_on_tape(&toy.bundle, &mut tape, &frozen, x, toy.steps, 3);
    let clean = tape.value(probs).clone();

    let rng = seed::rng(99, &[1]);
    let from_tape = tape_gradients(&toy.bundle, &[Group::Model], &|t, p| {
        let mut r = rng.clone();
        vat_on_tape(&toy.bundle, t, p, &toy.unlabeled, toy.steps, 3, &clean, cfg, &mut r)
    });
    let init = random_directions(toy.unlabeled.nrows(), toy.unlabeled.ncols(), &mut rng.clone());
    let dir = vat_direction_from(&toy.bundle, &toy.unlabeled, toy.steps, 3, &clean, &init, cfg.xi, cfg.power_iters);
    let fixed = tape_gradients(&toy.bundle, &[Group::Model], &|t, p| toy.vat_fixed(t, p, &dir, &clean, cfg.epsilon));
    assert!(max_diff(&from_tape, &fixed) < 1e-12);

    let r = check_gradients(&toy.bundle.params, &[Group::Model], 1e-5, &|t, p| toy.vat_fixed(t, p, &dir, &clean, cfg.epsilon));
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn adversarial_model_gradient_leaves_discriminator_untouched() {
    let toy = ToyProblem::new(2, 3, 5, 8, 3, 4, 3).unwrap();
    let g = tape_gradients(&toy.bundle, &[Group::Model], &|t, p| toy.adversarial(t, p));
    for id in toy.bundle.params.ids() {
        if toy.bundle.params.group(id) == Group::Discriminator {
            assert!(g[id.index()].is_none(), "{}", toy.bundle.params.name(id));
        }
    }
}
