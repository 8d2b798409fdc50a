//! Comparison strategies: supervised-only, pseudo-labels, VAT, VAT with
//! entropy minimisation, inpainting-only pretext training, and the
//! component ablations of the full method. All of them run through the same
//! trainer loop and differ only in which loss terms are switched on.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{model_input, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{self, kl_sum_on_tape, LossComponents, LossReport};
use crate::models::{batch_matrix, ClassDistribution, ModelBundle};
use crate::neighborhood::sample_seed;
use crate::nn::Bound;
use crate::seed;
use crate::tape::{Mat, Tape, Var};

/// Every selectable strategy. The `sup*` names are the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    SupervisedOnly,
    PseudoLabels,
    Vat,
    VatEntmin,
    S4lInpainting,
    Assl,
    Sup,
    SupAdv,
    SupInp,
    SupInpAdv,
    SupNei,
    SupNeiAdv,
    SupInpNei,
    SupInpNeiAdv,
}

/// Which loss terms a strategy trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Terms {
    pub inpainting: bool,
    pub neighborhood: bool,
    pub adversarial: bool,
    pub vat: bool,
    pub entmin: bool,
}

impl Terms {
    /// Whether the unlabeled batch has to be encoded at all.
    pub fn uses_unlabeled(&self) -> bool {
        self.inpainting || self.neighborhood || self.adversarial || self.vat || self.entmin
    }
}

impl Strategy {
    pub const ALL: [Strategy; 14] = [
        Strategy::SupervisedOnly,
        Strategy::PseudoLabels,
        Strategy::Vat,
        Strategy::VatEntmin,
        Strategy::S4lInpainting,
        Strategy::Assl,
        Strategy::Sup,
        Strategy::SupAdv,
        Strategy::SupInp,
        Strategy::SupInpAdv,
        Strategy::SupNei,
        Strategy::SupNeiAdv,
        Strategy::SupInpNei,
        Strategy::SupInpNeiAdv,
    ];

    /// The SSL-component x adversarial grid used by the ablation command.
    pub const ABLATION: [Strategy; 8] = [
        Strategy::Sup,
        Strategy::SupInp,
        Strategy::SupNei,
        Strategy::SupInpNei,
        Strategy::SupAdv,
        Strategy::SupInpAdv,
        Strategy::SupNeiAdv,
        Strategy::SupInpNeiAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SupervisedOnly => "supervised_only",
            Strategy::PseudoLabels => "pseudo_labels",
            Strategy::Vat => "vat",
            Strategy::VatEntmin => "vat_entmin",
            Strategy::S4lInpainting => "s4l_inpainting",
            Strategy::Assl => "assl",
            Strategy::Sup => "sup",
            Strategy::SupAdv => "sup_adv",
            Strategy::SupInp => "sup_inp",
            Strategy::SupInpAdv => "sup_inp_adv",
            Strategy::SupNei => "sup_nei",
            Strategy::SupNeiAdv => "sup_nei_adv",
            Strategy::SupInpNei => "sup_inp_nei",
            Strategy::SupInpNeiAdv => "sup_inp_nei_adv",
        }
    }

    pub fn valid_names() -> Vec<&'static str> {
        Self::ALL.iter().map(|s| s.name()).collect()
    }

    pub fn terms(self) -> Terms {
        let t = |inpainting, neighborhood, adversarial| Terms { inpainting, neighborhood, adversarial, ..Terms::default() };
        match self {
            Strategy::SupervisedOnly | Strategy::PseudoLabels | Strategy::Sup => Terms::default(),
            Strategy::Vat => Terms { vat: true, ..Terms::default() },
            Strategy::VatEntmin => Terms { vat: true, entmin: true, ..Terms::default() },
            Strategy::S4lInpainting | Strategy::SupInp => t(true, false, false),
            Strategy::Assl | Strategy::SupInpNeiAdv => t(true, true, true),
            Strategy::SupAdv => t(false, false, true),
            Strategy::SupInpAdv => t(true, false, true),
            Strategy::SupNei => t(false, true, false),
            Strategy::SupNeiAdv => t(false, true, true),
            Strategy::SupInpNei => t(true, true, false),
        }
    }

    /// Hyperparameter names this strategy accepts, with defaults.
    pub fn default_hyperparameters(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            Strategy::PseudoLabels => &[("confidence_threshold", 0.0), ("rounds", 1.0)],
            Strategy::Vat | Strategy::VatEntmin => &[
                ("epsilon", VatConfig::default().epsilon),
                ("xi", VatConfig::default().xi),
                ("power_iters", VatConfig::default().power_iters as f64),
            ],
            _ => &[],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`; valid names: {}", Self::valid_names().join(", "))))
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A strategy plus its hyperparameters. Unset hyperparameters take the
/// strategy's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: Strategy,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
}

impl StrategySpec {
    pub fn new(name: Strategy) -> Self {
        Self { name, hyperparameters: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let defaults = self.name.default_hyperparameters();
        for (k, v) in &self.hyperparameters {
            if !defaults.contains_key(k) {
                return Err(Error::Config(format!(
                    "strategy {} has no hyperparameter `{k}` (accepted: {})",
                    self.name,
                    defaults.keys().cloned().collect::<Vec<_>>().join(", ")
                )));
            }
            let ok = match k.as_str() {
                "confidence_threshold" => (0.0..=1.0).contains(v),
                "rounds" | "power_iters" => *v >= 1.0 && v.fract() == 0.0,
                "epsilon" => *v >= 0.0 && v.is_finite(),
                "xi" => *v > 0.0 && v.is_finite(),
                _ => true,
            };
            if !ok {
                return Err(Error::Config(format!("hyperparameter {k} = {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> f64 {
        self.hyperparameters
            .get(key)
            .copied()
            .or_else(|| self.name.default_hyperparameters().get(key).copied())
            .unwrap_or(0.0)
    }

    pub fn vat(&self) -> VatConfig {
        VatConfig { epsilon: self.get("epsilon"), xi: self.get("xi"), power_iters: self.get("power_iters") as usize }
    }
}

impl Default for StrategySpec {
    fn default() -> Self {
        Self::new(Strategy::Assl)
    }
}

/// Unlabeled samples whose maximum predicted probability reaches
/// `threshold`, paired with their argmax class (ties to the lowest index).
pub fn select_pseudo_labels(ids: &[String], preds: &[ClassDistribution], threshold: f64) -> Vec<(String, usize)> {
    ids.iter()
        .zip(preds)
        .filter(|(_, p)| p.max_prob() >= threshold)
        .map(|(id, p)| (id.clone(), p.argmax()))
        .collect()
}

/// Predicts the unlabeled pool and moves the confident samples, with their
/// predicted labels, into the labeled pool.
pub fn pseudo_label_round(
    bundle: &ModelBundle,
    split: &DatasetSplit,
    confidence_threshold: f64,
    frames: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if split.unlabeled().is_empty() {
        return Ok(split.clone());
    }
    let inputs: Vec<Array3<f64>> = split
        .unlabeled()
        .iter()
        .map(|s| model_input(s, frames, sample_seed(seed, &s.id)))
        .collect();
    let preds = bundle.predict(&inputs)?;
    let ids: Vec<String> = split.unlabeled().iter().map(|s| s.id.clone()).collect();
    Ok(split.with_extra_labels(&select_pseudo_labels(&ids, &preds, confidence_threshold)))
}

/// Virtual adversarial training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iters: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self { epsilon: 2.0, xi: 1e-6, power_iters: 1 }
    }
}

/// Class probabilities for a batch-layout input, `B x C`.
pub fn probs_on_tape(bundle: &ModelBundle, tape: &mut Tape, p: &Bound, xs: Var, steps: usize, batch: usize) -> Var {
    let h = bundle.encode_on_tape(tape, p, xs, steps, batch);
    let hbar = bundle.translate_on_tape(tape, p, h);
    bundle.classify_on_tape(tape, p, hbar)
}

/// Scales each sample's entries (rows `t * batch + b` for all `t`) to unit
/// Euclidean norm. All-zero samples are left at zero.
pub fn normalize_per_sample(m: &Mat, steps: usize, batch: usize) -> Mat {
    let mut norms = vec![0.0; batch];
    for t in 0..steps {
        for (b, n) in norms.iter_mut().enumerate() {
            *n += m.row(t * batch + b).iter().map(|x| x * x).sum::<f64>();
        }
    }
    let mut out = m.clone();
    for t in 0..steps {
        for (b, n) in norms.iter().enumerate() {
            if *n > 0.0 {
                let inv = 1.0 / n.sqrt();
                out.row_mut(t * batch + b).mapv_inplace(|x| x * inv);
            }
        }
    }
    out
}

/// Power iteration for the input direction that most increases
/// `KL(clean || f(x + r))`, started from `init`. Returns per-sample unit
/// directions in batch layout.
pub fn vat_direction_from(
    bundle: &ModelBundle,
    xs: &Mat,
    steps: usize,
    batch: usize,
    clean: &Mat,
    init: &Mat,
    xi: f64,
    power_iters: usize,
) -> Mat {
    let mut d = normalize_per_sample(init, steps, batch);
    for _ in 0..power_iters {
        let mut tape = Tape::new();
        let p = bundle.params.bind(&mut tape, &[]);
        let x = tape.constant(xs.clone());
        let r = tape.param(d.mapv(|v| v * xi));
        let xr = tape.add(x, r);
        let probs = probs_on_tape(bundle, &mut tape, &p, xr, steps, batch);
        let target = tape.constant(clean.clone());
        let kl = kl_sum_on_tape(&mut tape, target, probs);
        let mut grads = tape.backward(kl);
        if let Some(g) = grads.take(r) {
            let next = normalize_per_sample(&g, steps, batch);
            // Samples whose gradient vanished keep the previous direction.
            let mut zero = vec![true; batch];
            for t in 0..steps {
                for (b, z) in zero.iter_mut().enumerate() {
                    *z &= g.row(t * batch + b).iter().all(|&v| v == 0.0);
                }
            }
            for t in 0..steps {
                for (b, z) in zero.iter().enumerate() {
                    if !z {
                        d.row_mut(t * batch + b).assign(&next.row(t * batch + b));
                    }
                }
            }
        }
    }
    d
}

/// Random Gaussian starting directions in batch layout.
pub fn random_directions(rows: usize, cols: usize, rng: &mut seed::Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// VAT consistency term for a batch: mean over samples of
/// `KL(clean || f(x + epsilon * d_adv))`, with `clean` held fixed.
pub fn vat_on_tape(
    bundle: &ModelBundle,
    tape: &mut Tape,
    p: &Bound,
    xs: &Mat,
    steps: usize,
    batch: usize,
    clean: &Mat,
    cfg: VatConfig,
    rng: &mut seed::Rng,
) -> Var {
    let init = random_directions(xs.nrows(), xs.ncols(), rng);
    let d = vat_direction_from(bundle, xs, steps, batch, clean, &init, cfg.xi, cfg.power_iters);
    let adv = tape.constant(xs + &d.mapv(|v| v * cfg.epsilon));
    let probs = probs_on_tape(bundle, tape, p, adv, steps, batch);
    let target = tape.constant(clean.clone());
    let kl = kl_sum_on_tape(tape, target, probs);
    tape.scale(kl, 1.0 / batch as f64)
}

fn clean_probs(bundle: &ModelBundle, x: &Array3<f64>) -> Result<Mat> {
    let preds = bundle.predict(std::slice::from_ref(x))?;
    Ok(preds[0].0.clone().insert_axis(ndarray::Axis(0)))
}

/// `KL(f(x) || f(x + r))` for one sample and a given perturbation.
pub fn vat_loss_with_perturbation(bundle: &ModelBundle, x: &Array3<f64>, r: &Array3<f64>) -> Result<f64> {
    let clean = ClassDistribution(bundle.predict(std::slice::from_ref(x))?.remove(0).0);
    let perturbed = x + r;
    let adv = bundle.predict(std::slice::from_ref(&perturbed))?.remove(0);
    Ok(losses::kl_divergence(&clean, &adv))
}

/// Unit-norm adversarial direction for one sample, from `init`.
pub fn vat_adversarial_direction(
    bundle: &ModelBundle,
    x: &Array3<f64>,
    init: &Array3<f64>,
    xi: f64,
    power_iters: usize,
) -> Result<Array3<f64>> {
    let steps = x.dim().0;
    let clean = clean_probs(bundle, x)?;
    let xs = batch_matrix(&[x]);
    let init = batch_matrix(&[init]);
    let d = vat_direction_from(bundle, &xs, steps, 1, &clean, &init, xi, power_iters);
    Ok(crate::models::unbatch(&d, steps, 1, 0))
}

/// VAT loss of one sample with a seeded random start.
pub fn vat_loss(bundle: &ModelBundle, x: &Array3<f64>, cfg: VatConfig, seed: u64) -> Result<f64> {
    if cfg.epsilon < 0.0 || cfg.xi <= 0.0 || cfg.power_iters == 0 {
        return Err(Error::Config("VAT needs epsilon >= 0, xi > 0 and at least one power iteration".into()));
    }
    let mut rng = seed::rng(seed, &[0x7a7]);
    let (t, j, c) = x.dim();
    let init = Array3::from_shape_fn((t, j, c), |_| rng.sample(StandardNormal));
    let d = vat_adversarial_direction(bundle, x, &init, cfg.xi, cfg.power_iters)?;
    vat_loss_with_perturbation(bundle, x, &d.mapv(|v| v * cfg.epsilon))
}

/// Mean prediction entropy.
pub fn entmin_loss(preds: &[ClassDistribution]) -> f64 {
    losses::entropy(preds)
}

/// Supervised loss plus `lambda1` times the inpainting loss; every other
/// term is zero.
pub fn s4l_inpainting_objective(l_sup: f64, l_inp: f64, lambda1: f64) -> Result<LossReport> {
    losses::total_objective(LossComponents { l_sup, l_inp, ..LossComponents::default() }, lambda1, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution(ndarray::Array1::from(v.to_vec()))
    }

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn inpainting_baseline_matches_ablation_variant() {
        assert_eq!(Strategy::S4lInpainting.terms(), Strategy::SupInp.terms());
        assert_eq!(Strategy::Assl.terms(), Strategy::SupInpNeiAdv.terms());
        assert!(!Strategy::SupervisedOnly.terms().uses_unlabeled());
    }

    #[test]
    fn pseudo_label_filter() {
        let ids: Vec<String> = (0..5).map(|i| format!("u{i}")).collect();
        let preds = [
            dist(&[0.7, 0.2, 0.1]),
            dist(&[0.5, 0.5, 0.0]),
            dist(&[0.1, 0.05, 0.85]),
            dist(&[0.3, 0.3, 0.4]),
            dist(&[0.2, 0.61, 0.19]),
        ];
        let picked = select_pseudo_labels(&ids, &preds, 0.6);
        assert_eq!(picked, vec![("u0".to_string(), 0), ("u2".to_string(), 2), ("u4".to_string(), 1)]);
        assert_eq!(select_pseudo_labels(&ids, &preds, 0.0).len(), 5);
        assert!(select_pseudo_labels(&ids, &preds, 1.0).is_empty());
        assert_eq!(select_pseudo_labels(&ids[1..2], &preds[1..2], 0.0), vec![("u1".to_string(), 0)]);
    }

    #[test]
    fn hyperparameters_are_checked() {
        let mut s = StrategySpec::new(Strategy::Vat);
        assert_eq!(s.vat(), VatConfig::default());
        s.hyperparameters.insert("epsilon".into(), 0.5);
        assert!(s.validate().is_ok());
        assert_eq!(s.vat().epsilon, 0.5);
        s.hyperparameters.insert("threshold".into(), 0.5);
        assert!(s.validate().is_err());
        let mut p = StrategySpec::new(Strategy::PseudoLabels);
        p.hyperparameters.insert("confidence_threshold".into(), 1.5);
        assert!(p.validate().is_err());
    }

    #[test]
    fn per_sample_normalisation() {
        let m = array![[3.0, 0.0], [0.0, 0.0], [4.0, 0.0], [0.0, 0.0]];
        let n = normalize_per_sample(&m, 2, 2);
        let expect = array![[0.6, 0.0], [0.0, 0.0], [0.8, 0.0], [0.0, 0.0]];
        assert!(n.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn entmin_cases() {
        assert!(entmin_loss(&[dist(&[1.0, 0.0, 0.0])]) < 1e-7);
        assert!((entmin_loss(&[dist(&[0.25; 4])]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inpainting_objective_disables_other_terms() {
        let r = s4l_inpainting_objective(0.7, 0.3, 1.0).unwrap();
        assert_eq!((r.l_kl, r.l_ce_center, r.l_adv), (0.0, 0.0, 0.0));
        assert_eq!(r.total, 0.7 + 0.3);
        assert_eq!(s4l_inpainting_objective(0.7, 0.3, 0.0).unwrap().total, 0.7);
    }
}
