//! Central finite-difference checks of tape gradients, plus a toy-sized
//! suite that builds every training objective term.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::baselines::{self, VatConfig};
use crate::data::{apply_mask, MaskSpec};
use crate::error::Result;
use crate::losses;
use crate::models::{batch_matrix, ModelBundle, ModelConfig};
use crate::neighborhood::attention_center_on_tape;
use crate::nn::{Bound, Group, ParamStore};
use crate::seed;
use crate::tape::{Mat, Tape, Var};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest analytic gradient magnitude seen.
    pub max_abs_gradient: f64,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn evaluate(params: &ParamStore, f: &dyn Fn(&mut Tape, &Bound) -> Var) -> f64 {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, &[]);
    let out = f(&mut tape, &p);
    tape.scalar(out)
}

/// Compares the tape gradient of `f` with respect to every entry of every
/// parameter in `groups` against `(f(w + h) - f(w - h)) / 2h`.
pub fn check_gradients(params: &ParamStore, groups: &[Group], step: f64, f: &dyn Fn(&mut Tape, &Bound) -> Var) -> GradCheck {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, groups);
    let out = f(&mut tape, &p);
    let mut grads = tape.backward(out);
    let analytic = p.gradients(&mut grads);

    let mut report = GradCheck { checked: 0, max_abs_gradient: 0.0, max_rel_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0 };
    let mut work = params.clone();
    for id in params.ids() {
        if !groups.contains(&params.group(id)) {
            continue;
        }
        let shape = params.get(id).dim();
        let zeros = Mat::zeros(shape);
        let a = analytic[id.index()].as_ref().unwrap_or(&zeros);
        for flat in 0..params.get(id).len() {
            let idx = (flat / shape.1, flat % shape.1);
            let orig = params.get(id)[idx];
            work.get_mut(id)[idx] = orig + step;
            let plus = evaluate(&work, f);
            work.get_mut(id)[idx] = orig - step;
            let minus = evaluate(&work, f);
            work.get_mut(id)[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a[idx], numeric);
            report.checked += 1;
            report.max_abs_gradient = report.max_abs_gradient.max(a[idx].abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), flat));
                report.analytic = a[idx];
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Toy problem shared by the objective-term checks.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub bundle: ModelBundle,
    pub steps: usize,
    pub labeled: Mat,
    pub labels: Vec<usize>,
    pub unlabeled: Mat,
    pub masked: Mat,
    /// `K` bank features per unlabeled anchor, anchor-major.
    pub unlabeled_neighbors: Mat,
    /// `K` bank features per labeled anchor, anchor-major.
    pub labeled_neighbors: Mat,
    /// Bank features of positive neighbours and the anchor each belongs to.
    pub positives: Mat,
    pub positive_anchor: Vec<usize>,
    pub k: usize,
    pub vat_init: Mat,
}

impl ToyProblem {
    /// `J` joints, `C` classes, `T` frames and feature width `d`, with
    /// `batch` labeled and `batch` unlabeled samples.
    pub fn new(joints: usize, classes: usize, steps: usize, d: usize, batch: usize, k: usize, seed: u64) -> Result<Self> {
        let mut bundle = ModelBundle::new(ModelConfig::scaled(joints, classes, d / 2), seed)?;
        let mut rng = seed::rng(seed, &[0x9c4e]);
        // Move off the zero-bias initial point.
        for id in bundle.params.ids().collect::<Vec<_>>() {
            bundle.params.get_mut(id).mapv_inplace(|w| w + 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            Mat::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let seqs: Vec<Array3<f64>> = (0..2 * batch)
            .map(|_| Array3::from_shape_vec((steps, joints, 3), normal(steps, joints * 3, 0.5).into_raw_vec_and_offset().0).unwrap())
            .collect();
        let refs: Vec<&Array3<f64>> = seqs.iter().collect();
        let labeled = batch_matrix(&refs[..batch]);
        let unlabeled = batch_matrix(&refs[batch..]);
        let mut mrng = seed::rng(seed, &[0x3a5c]);
        let masked: Vec<Array3<f64>> = seqs[batch..]
            .iter()
            .map(|x| apply_mask(x, MaskSpec::random(steps, 0.4, &mut mrng)).map(|m| m.0))
            .collect::<Result<_>>()?;
        let masked_refs: Vec<&Array3<f64>> = masked.iter().collect();
        let unlabeled_neighbors = normal(batch * k, d, 0.3);
        let labeled_neighbors = normal(batch * k, d, 0.3);
        let positive_anchor: Vec<usize> = (0..batch).flat_map(|i| std::iter::repeat_n(i, 1 + i % 2)).collect();
        let positives = normal(positive_anchor.len(), d, 0.3);
        let vat_init = normal(steps * batch, joints * 3, 1.0);
        Ok(Self {
            labels: (0..batch).map(|i| i % classes).collect(),
            masked: batch_matrix(&masked_refs),
            bundle,
            steps,
            labeled,
            unlabeled,
            unlabeled_neighbors,
            labeled_neighbors,
            positives,
            positive_anchor,
            k,
            vat_init,
        })
    }

    fn batch(&self) -> usize {
        self.labels.len()
    }

    fn translated(&self, tape: &mut Tape, p: &Bound, xs: &Mat) -> Var {
        let x = tape.constant(xs.clone());
        let h = self.bundle.encode_on_tape(tape, p, x, self.steps, self.batch());
        self.bundle.translate_on_tape(tape, p, h)
    }

    /// Supervised cross-entropy on the labeled batch.
    pub fn supervised(&self, tape: &mut Tape, p: &Bound) -> Var {
        let hbar = self.translated(tape, p, &self.labeled);
        let probs = self.bundle.classify_on_tape(tape, p, hbar);
        losses::cross_entropy_on_tape(tape, probs, &self.labels).expect("labels in range")
    }

    /// Reconstruction error of the decoder on masked unlabeled sequences.
    pub fn inpainting(&self, tape: &mut Tape, p: &Bound) -> Var {
        let xm = tape.constant(self.masked.clone());
        let h = self.bundle.encode_on_tape(tape, p, xm, self.steps, self.batch());
        let recon = self.bundle.decode_on_tape(tape, p, h, xm, self.steps, self.batch());
        let orig = tape.constant(self.unlabeled.clone());
        losses::mse_on_tape(tape, recon, orig)
    }

    /// Neighbourhood KL consistency; `stop_gradient` detaches the centre's
    /// prediction.
    pub fn neighborhood_kl(&self, tape: &mut Tape, p: &Bound, stop_gradient: bool) -> Var {
        let hbar_u = self.translated(tape, p, &self.unlabeled);
        let probs_u = self.bundle.classify_on_tape(tape, p, hbar_u);
        let nbrs = tape.constant(self.unlabeled_neighbors.clone());
        let (_, center) = attention_center_on_tape(&self.bundle, tape, p, hbar_u, nbrs, self.k);
        let pc = self.bundle.classify_on_tape(tape, p, center);
        let target = if stop_gradient { tape.detach(pc) } else { pc };
        let kl = losses::kl_sum_on_tape(tape, target, probs_u);
        let pf = tape.constant(self.positives.clone());
        let pp = self.bundle.classify_on_tape(tape, p, pf);
        let tg = tape.gather(target, &self.positive_anchor);
        let kl_pos = losses::kl_sum_on_tape(tape, tg, pp);
        let sum = tape.add(kl, kl_pos);
        tape.scale(sum, 1.0 / self.batch() as f64)
    }

    /// Cross-entropy of labeled anchors' local centres.
    pub fn center_ce(&self, tape: &mut Tape, p: &Bound) -> Var {
        let hbar_l = self.translated(tape, p, &self.labeled);
        let nbrs = tape.constant(self.labeled_neighbors.clone());
        let (_, center) = attention_center_on_tape(&self.bundle, tape, p, hbar_l, nbrs, self.k);
        let probs = self.bundle.classify_on_tape(tape, p, center);
        losses::cross_entropy_on_tape(tape, probs, &self.labels).expect("labels in range")
    }

    /// Adversarial objective on labeled vs unlabeled translated features.
    pub fn adversarial(&self, tape: &mut Tape, p: &Bound) -> Var {
        let hl = self.translated(tape, p, &self.labeled);
        let hu = self.translated(tape, p, &self.unlabeled);
        let dl = self.bundle.discriminate_on_tape(tape, p, hl);
        let du = self.bundle.discriminate_on_tape(tape, p, hu);
        losses::adversarial_on_tape(tape, dl, du)
    }

    fn clean_probs(&self) -> Mat {
        let mut tape = Tape::new();
        let p = self.bundle.params.bind(&mut tape, &[]);
        let x = tape.constant(self.unlabeled.clone());
        let probs = baselines::probs_on_tape(&self.bundle, &mut tape, &p, x, self.steps, self.batch());
        tape.value(probs).clone()
    }

    /// Adversarial direction for the unlabeled batch under the current
    /// parameters.
    pub fn vat_direction(&self, cfg: VatConfig) -> Mat {
        let clean = self.clean_probs();
        baselines::vat_direction_from(&self.bundle, &self.unlabeled, self.steps, self.batch(), &clean, &self.vat_init, cfg.xi, cfg.power_iters)
    }

    /// VAT loss with the perturbation direction `dir` and clean predictions
    /// `clean` held fixed.
    pub fn vat_fixed(&self, tape: &mut Tape, p: &Bound, dir: &Mat, clean: &Mat, epsilon: f64) -> Var {
        let adv = tape.constant(&self.unlabeled + &dir.mapv(|v| v * epsilon));
        let probs = baselines::probs_on_tape(&self.bundle, tape, p, adv, self.steps, self.batch());
        let target = tape.constant(clean.clone());
        let kl = losses::kl_sum_on_tape(tape, target, probs);
        tape.scale(kl, 1.0 / self.batch() as f64)
    }

    /// Mean prediction entropy on the unlabeled batch.
    pub fn entmin(&self, tape: &mut Tape, p: &Bound) -> Var {
        let hbar = self.translated(tape, p, &self.unlabeled);
        let probs = self.bundle.classify_on_tape(tape, p, hbar);
        losses::entropy_on_tape(tape, probs)
    }
}

/// Runs the check for every objective term at toy size. Returns one named
/// report per term.
pub fn loss_term_suite(seed: u64, step: f64) -> Result<Vec<(String, GradCheck)>> {
    let toy = ToyProblem::new(2, 3, 5, 8, 3, 4, seed)?;
    let params = &toy.bundle.params;
    let model = [Group::Model];
    let mut out = vec![
        ("L_L".to_string(), check_gradients(params, &model, step, &|t, p| toy.supervised(t, p))),
        ("L_inp".to_string(), check_gradients(params, &model, step, &|t, p| toy.inpainting(t, p))),
        ("L_KL".to_string(), check_gradients(params, &model, step, &|t, p| toy.neighborhood_kl(t, p, false))),
        ("L_CE^c".to_string(), check_gradients(params, &model, step, &|t, p| toy.center_ce(t, p))),
        ("L_adv (model)".to_string(), check_gradients(params, &model, step, &|t, p| toy.adversarial(t, p))),
        (
            "L_adv (discriminator)".to_string(),
            check_gradients(params, &[Group::Discriminator], step, &|t, p| toy.adversarial(t, p)),
        ),
    ];
    let cfg = VatConfig::default();
    let dir = toy.vat_direction(cfg);
    let clean = toy.clean_probs();
    out.push(("VAT".to_string(), check_gradients(params, &model, step, &|t, p| toy.vat_fixed(t, p, &dir, &clean, cfg.epsilon))));
    out.push(("EntMin".to_string(), check_gradients(params, &model, step, &|t, p| toy.entmin(t, p))));
    Ok(out)
}
