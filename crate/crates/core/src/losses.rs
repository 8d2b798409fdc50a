//! Objective terms.
//!
//! Every loss exists twice: a plain function over probabilities/arrays
//! (used for reporting and as a reference) and an `*_on_tape` builder used
//! for training. Probabilities are floored at [`PROB_FLOOR`] before logs.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::MaskSpec;
use crate::error::{Error, Result};
use crate::models::ClassDistribution;
use crate::tape::{Tape, Var};

pub const PROB_FLOOR: f64 = 1e-8;

fn flog(x: f64) -> f64 {
    if x < PROB_FLOOR { PROB_FLOOR.ln() } else { x.ln() }
}

/// Mean squared error over every entry of the sequence (masked and
/// visible frames alike).
pub fn inpainting_loss(recon: &Array3<f64>, original: &Array3<f64>, mask: MaskSpec) -> Result<f64> {
    if recon.dim() != original.dim() {
        return Err(Error::Contract(format!(
            "reconstruction shape {:?} differs from original {:?}",
            recon.dim(),
            original.dim()
        )));
    }
    mask.validate(original.dim().0)?;
    let sum: f64 = recon.iter().zip(original).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / recon.len() as f64)
}

/// `KL(p || q) = sum_c p_c (ln p_c - ln q_c)`; `p` is the reference.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> f64 {
    p.0.iter().zip(q.0.iter()).map(|(&pc, &qc)| pc * (flog(pc) - flog(qc))).sum()
}

/// Predictions gathered around one unlabeled anchor.
#[derive(Debug, Clone)]
pub struct NeighborhoodPredictions {
    /// `f_c(c_u)`, the local centre's prediction.
    pub center: ClassDistribution,
    /// `f_c(h̄_u)`.
    pub anchor: ClassDistribution,
    /// `f_c(h̄_u^k)` for every positive neighbour.
    pub positives: Vec<ClassDistribution>,
}

/// Neighbourhood consistency, averaged over anchors.
pub fn neighborhood_kl_loss(anchors: &[NeighborhoodPredictions]) -> f64 {
    if anchors.is_empty() {
        return 0.0;
    }
    let total: f64 = anchors
        .iter()
        .map(|a| {
            kl_divergence(&a.center, &a.anchor)
                + a.positives.iter().map(|p| kl_divergence(&a.center, p)).sum::<f64>()
        })
        .sum();
    total / anchors.len() as f64
}

fn mean_cross_entropy(preds: &[ClassDistribution], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        let prob = p.0.get(y).ok_or_else(|| {
            Error::Contract(format!("label {y} out of range for {} classes", p.0.len()))
        })?;
        sum -= flog(*prob);
    }
    Ok(sum / preds.len() as f64)
}

/// Cross-entropy of the local centres of labeled anchors against their labels.
pub fn center_ce_loss(centers: &[ClassDistribution], labels: &[usize]) -> Result<f64> {
    mean_cross_entropy(centers, labels)
}

/// Cross-entropy of labeled predictions.
pub fn supervised_loss(preds: &[ClassDistribution], labels: &[usize]) -> Result<f64> {
    mean_cross_entropy(preds, labels)
}

/// `mean(ln D(h̄_l)) + mean(ln(1 - D(h̄_u)))`. The discriminator maximises
/// this; the feature extractor minimises it.
pub fn adversarial_loss(labeled_scores: &[f64], unlabeled_scores: &[f64]) -> f64 {
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
        }
    };
    mean(labeled_scores, &f64::ln) + mean(unlabeled_scores, &|x| (1.0 - x).ln())
}

/// One row of objective values with the weights that combined them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_kl: f64,
    pub l_ce_center: f64,
    pub l_inp: f64,
    pub l_unlabeled: f64,
    pub l_adv: f64,
    pub l_vat: f64,
    pub l_entmin: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Raw term values before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub l_sup: f64,
    pub l_kl: f64,
    pub l_ce_center: f64,
    pub l_inp: f64,
    pub l_adv: f64,
    pub l_vat: f64,
    pub l_entmin: f64,
}

pub const DEFAULT_LAMBDA1: f64 = 1.0;
pub const DEFAULT_LAMBDA2: f64 = 0.1;

/// `L_U = L_KL + L_CE^c + L_inp` and
/// `L = L_L + λ1 L_U + λ2 L_adv (+ L_vat + L_entmin)`.
pub fn total_objective(c: LossComponents, lambda1: f64, lambda2: f64) -> Result<LossReport> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got λ1={lambda1}, λ2={lambda2}")));
    }
    let l_unlabeled = c.l_kl + c.l_ce_center + c.l_inp;
    let total = c.l_sup + lambda1 * l_unlabeled + lambda2 * c.l_adv + c.l_vat + c.l_entmin;
    Ok(LossReport {
        l_sup: c.l_sup,
        l_kl: c.l_kl,
        l_ce_center: c.l_ce_center,
        l_inp: c.l_inp,
        l_unlabeled,
        l_adv: c.l_adv,
        l_vat: c.l_vat,
        l_entmin: c.l_entmin,
        total,
        lambda1,
        lambda2,
    })
}

/// Mean entropy of predictions.
pub fn entropy(preds: &[ClassDistribution]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let sum: f64 = preds.iter().map(|p| -p.0.iter().map(|&x| x * flog(x)).sum::<f64>()).sum();
    sum / preds.len() as f64
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} out of range for {classes} classes")));
        }
        y[[i, l]] = 1.0;
    }
    Ok(y)
}

/// Mean cross-entropy of `probs` (`N x C`) against `labels`.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(probs).ncols();
    let y = tape.constant(one_hot(labels, classes)?);
    let logp = tape.log_floor(probs, PROB_FLOOR);
    let picked = tape.mul(y, logp);
    let sum = tape.sum_all(picked);
    Ok(tape.scale(sum, -1.0 / labels.len() as f64))
}

/// Sum over rows of `KL(target_row || pred_row)`.
pub fn kl_sum_on_tape(tape: &mut Tape, target: Var, pred: Var) -> Var {
    let lt = tape.log_floor(target, PROB_FLOOR);
    let lp = tape.log_floor(pred, PROB_FLOOR);
    let diff = tape.sub(lt, lp);
    let weighted = tape.mul(target, diff);
    tape.sum_all(weighted)
}

pub fn mse_on_tape(tape: &mut Tape, recon: Var, original: Var) -> Var {
    let diff = tape.sub(recon, original);
    let sq = tape.mul(diff, diff);
    tape.mean_all(sq)
}

/// Adversarial objective from discriminator outputs (`L x 1` and `U x 1`).
pub fn adversarial_on_tape(tape: &mut Tape, labeled: Var, unlabeled: Var) -> Var {
    let log_l = tape.log(labeled);
    let term_l = tape.mean_all(log_l);
    let neg = tape.scale(unlabeled, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_u = tape.log(one_minus);
    let term_u = tape.mean_all(log_u);
    tape.add(term_l, term_u)
}

/// Mean entropy of `probs` rows.
pub fn entropy_on_tape(tape: &mut Tape, probs: Var) -> Var {
    let n = tape.value(probs).nrows();
    let logp = tape.log_floor(probs, PROB_FLOOR);
    let plogp = tape.mul(probs, logp);
    let sum = tape.sum_all(plogp);
    tape.scale(sum, -1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution(ndarray::Array1::from(v.to_vec()))
    }

    #[test]
    fn inpainting_loss_cases() {
        let x = Array3::from_shape_fn((3, 2, 3), |(a, b, c)| (a + 2 * b + 3 * c) as f64 * 0.1);
        let m = MaskSpec::new(0, 1, 3).unwrap();
        assert_eq!(inpainting_loss(&x, &x, m).unwrap(), 0.0);
        assert_eq!(inpainting_loss(&(&x + 1.0), &x, m).unwrap(), 1.0);
        let y = Array3::from_shape_fn((3, 2, 3), |(a, b, c)| ((a * 7 + b * 3 + c) % 5) as f64 * 0.3);
        let mut manual = 0.0;
        for a in 0..3 {
            for b in 0..2 {
                for c in 0..3 {
                    manual += (y[[a, b, c]] - x[[a, b, c]]).powi(2);
                }
            }
        }
        assert!((inpainting_loss(&y, &x, m).unwrap() - manual / 18.0).abs() < 1e-15);
        let z = Array3::zeros((3, 1, 3));
        assert!(matches!(inpainting_loss(&z, &x, m), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_closed_forms() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert!(kl_divergence(&p, &p).abs() < 1e-15);
        let v = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5]));
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_summation_loop() {
        let p: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
        let q: [f64; 4] = [0.25, 0.15, 0.35, 0.25];
        let mut manual = 0.0;
        for c in 0..4 {
            manual += p[c] * (p[c] / q[c]).ln();
        }
        assert!((kl_divergence(&dist(&p), &dist(&q)) - manual).abs() < 1e-10);
    }

    #[test]
    fn kl_floors_zero_reference_probabilities() {
        let v = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]));
        let expect = 0.5 * 0.5f64.ln() + 0.5 * (0.5f64.ln() - 1e-8f64.ln());
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn neighborhood_kl_cases() {
        let u = dist(&[0.3, 0.3, 0.4]);
        let same = NeighborhoodPredictions { center: u.clone(), anchor: u.clone(), positives: vec![u.clone(); 3] };
        assert_eq!(neighborhood_kl_loss(&[same]), 0.0);

        let a = NeighborhoodPredictions {
            center: dist(&[0.6, 0.3, 0.1]),
            anchor: dist(&[0.2, 0.5, 0.3]),
            positives: vec![],
        };
        assert_eq!(neighborhood_kl_loss(&[a.clone()]), kl_divergence(&a.center, &a.anchor));

        let b = NeighborhoodPredictions {
            center: dist(&[0.1, 0.1, 0.8]),
            anchor: dist(&[0.3, 0.3, 0.4]),
            positives: vec![dist(&[0.2, 0.2, 0.6]), dist(&[0.05, 0.15, 0.8])],
        };
        let k = |p: [f64; 3], q: [f64; 3]| (0..3).map(|i| p[i] * (p[i] / q[i]).ln()).sum::<f64>();
        let manual = (k([0.6, 0.3, 0.1], [0.2, 0.5, 0.3])
            + k([0.1, 0.1, 0.8], [0.3, 0.3, 0.4])
            + k([0.1, 0.1, 0.8], [0.2, 0.2, 0.6])
            + k([0.1, 0.1, 0.8], [0.05, 0.15, 0.8]))
            / 2.0;
        assert!((neighborhood_kl_loss(&[a, b]) - manual).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(center_ce_loss(&[dist(&[0.0, 1.0, 0.0])], &[1]).unwrap() < 1e-7);
        let uniform4 = dist(&[0.25; 4]);
        assert!((center_ce_loss(&[uniform4], &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let preds = [dist(&[0.7, 0.2, 0.1]), dist(&[0.1, 0.1, 0.8]), dist(&[0.3, 0.4, 0.3])];
        let manual = -(0.7f64.ln() + 0.8f64.ln() + 0.3f64.ln()) / 3.0;
        assert!((center_ce_loss(&preds, &[0, 2, 2]).unwrap() - manual).abs() < 1e-12);
        assert!(matches!(center_ce_loss(&preds[..1], &[3]), Err(Error::Contract(_))));

        let uniform10 = dist(&[0.1; 10]);
        assert!((supervised_loss(&[uniform10], &[9]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(supervised_loss(&[dist(&[1.0, 0.0])], &[0]).unwrap() < 1e-7);
        assert!(matches!(supervised_loss(&[dist(&[1.0, 0.0])], &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn adversarial_cases() {
        let half = adversarial_loss(&[0.5, 0.5], &[0.5]);
        assert!((half + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(adversarial_loss(&[1.0 - 1e-12], &[1e-12]).abs() < 1e-10);
        let l = [0.9, 0.6];
        let u = [0.2, 0.4, 0.7];
        let manual = (0.9f64.ln() + 0.6f64.ln()) / 2.0 + (0.8f64.ln() + 0.6f64.ln() + 0.3f64.ln()) / 3.0;
        assert!((adversarial_loss(&l, &u) - manual).abs() < 1e-12);
    }

    #[test]
    fn total_objective_composition() {
        let c = LossComponents { l_sup: 1.25, l_kl: 0.5, l_ce_center: 0.75, l_inp: 0.125, l_adv: -1.5, ..Default::default() };
        let r = total_objective(c, 0.0, 0.0).unwrap();
        assert_eq!(r.total, 1.25);
        let r = total_objective(c, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2).unwrap();
        assert_eq!((r.lambda1, r.lambda2), (1.0, 0.1));
        assert_eq!(r.l_unlabeled, 0.5 + 0.75 + 0.125);
        assert_eq!(r.total, 1.25 + 1.0 * (0.5 + 0.75 + 0.125) + 0.1 * -1.5);
        assert!(matches!(total_objective(c, -1.0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_cases() {
        assert!(entropy(&[dist(&[0.0, 1.0, 0.0])]) < 1e-7);
        assert!((entropy(&[dist(&[0.25; 4])]) - 4f64.ln()).abs() < 1e-12);
        let manual = -((0.5f64 * 0.5f64.ln()) * 2.0 + (0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln())) / 2.0;
        assert!((entropy(&[dist(&[0.5, 0.5]), dist(&[0.9, 0.1])]) - manual).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_agree_with_plain_versions() {
        let probs = array![[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]];
        let target = array![[0.2, 0.5, 0.3], [0.3, 0.3, 0.4]];
        let mut tape = Tape::new();
        let p = tape.constant(probs.clone());
        let t = tape.constant(target.clone());
        let ce = cross_entropy_on_tape(&mut tape, p, &[0, 2]).unwrap();
        let kl = kl_sum_on_tape(&mut tape, t, p);
        let ent = entropy_on_tape(&mut tape, p);
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| ClassDistribution(r.to_owned())).collect::<Vec<_>>();
        let (pd, td) = (rows(&probs), rows(&target));
        assert!((tape.scalar(ce) - supervised_loss(&pd, &[0, 2]).unwrap()).abs() < 1e-15);
        let kl_plain = kl_divergence(&td[0], &pd[0]) + kl_divergence(&td[1], &pd[1]);
        assert!((tape.scalar(kl) - kl_plain).abs() < 1e-14);
        assert!((tape.scalar(ent) - entropy(&pd)).abs() < 1e-15);

        let dl = tape.constant(array![[0.9], [0.6]]);
        let du = tape.constant(array![[0.2], [0.4], [0.7]]);
        let adv = adversarial_on_tape(&mut tape, dl, du);
        assert!((tape.scalar(adv) - adversarial_loss(&[0.9, 0.6], &[0.2, 0.4, 0.7])).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distribution(n: usize) -> impl Strategy<Value = ClassDistribution> {
            prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
                let s: f64 = v.iter().sum();
                ClassDistribution(v.into_iter().map(|x| x / s).collect())
            })
        }

        proptest! {
            #[test]
            fn kl_is_non_negative(p in distribution(5), q in distribution(5)) {
                prop_assert!(kl_divergence(&p, &q) >= -1e-15);
            }

            #[test]
            fn adversarial_loss_is_never_positive(
                l in prop::collection::vec(1e-9f64..1.0 - 1e-9, 1..8),
                u in prop::collection::vec(1e-9f64..1.0 - 1e-9, 1..8),
            ) {
                prop_assert!(adversarial_loss(&l, &u) <= 0.0);
            }

            #[test]
            fn total_is_linear_in_each_component(
                sup in 0.0f64..5.0, kl in 0.0f64..5.0, ce in 0.0f64..5.0, inp in 0.0f64..5.0,
                adv in -5.0f64..0.0, l1 in 0.0f64..2.0, l2 in 0.0f64..2.0,
            ) {
                let c = LossComponents { l_sup: sup, l_kl: kl, l_ce_center: ce, l_inp: inp, l_adv: adv, ..Default::default() };
                let r = total_objective(c, l1, l2).unwrap();
                prop_assert_eq!(r.l_unlabeled, kl + ce + inp);
                prop_assert_eq!(r.total, sup + l1 * (kl + ce + inp) + l2 * adv);
                let doubled = total_objective(LossComponents { l_sup: 2.0 * sup, ..c }, l1, l2).unwrap();
                prop_assert!((doubled.total - r.total - sup).abs() < 1e-12);
            }
        }
    }
}
