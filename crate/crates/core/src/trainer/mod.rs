//! The optimisation loop: batch composition, per-epoch feature-bank
//! refresh, alternating discriminator/model updates, the learning-rate
//! schedule, evaluation and metric records.

pub mod ablation;
pub mod export;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Strategy, StrategySpec};
use crate::checkpoint;
use crate::data::{apply_mask, model_input, DatasetSplit, MaskSpec, SkeletonSequence};
use crate::error::{Error, Result};
use crate::losses::{self, LossComponents, LossReport, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use crate::models::{batch_matrix, ModelBundle, ModelConfig};
use crate::neighborhood::{
    attention_center_on_tape, knn_query, neighbor_quality_ratio, rebuild_bank, sample_seed, select_positive,
    unlabeled_neighborhoods, FeatureBank, NeighborSet,
};
use crate::nn::Group;
use crate::optim::Adam;
use crate::seed;
use crate::tape::{Mat, Tape, Var};

/// Experiment configuration. Every field has a default, so a config file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: StrategySpec,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Neighbourhood size K.
    pub k: usize,
    /// Frames sampled per sequence (T).
    pub frames: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Treat the local centre's prediction as a fixed target in the
    /// neighbourhood KL term.
    pub kl_target_stop_gradient: bool,
    /// Length of the masked span as a fraction of `frames`.
    pub mask_fraction: f64,
    /// GRU width per direction; perceptron widths scale with it.
    pub hidden: usize,
    /// Discriminator updates per model update.
    pub disc_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: StrategySpec::default(),
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            k: 10,
            frames: 40,
            batch_labeled: 16,
            batch_unlabeled: 16,
            epochs: 100,
            lr: 0.0005,
            lr_decay: 0.5,
            lr_decay_every: 30,
            seed: 0,
            kl_target_stop_gradient: true,
            mask_fraction: 0.25,
            hidden: 512,
            disc_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        self.strategy.validate()?;
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("lambda1 and lambda2 must be non-negative");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.frames < 2 {
            return fail("frames must be at least 2");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return fail("batch sizes must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be at least 1");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return fail("mask_fraction must be in (0, 1]");
        }
        if self.hidden == 0 || self.disc_steps == 0 {
            return fail("hidden and disc_steps must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, joints: usize, classes: usize) -> ModelConfig {
        ModelConfig::scaled(joints, classes, self.hidden)
    }
}

/// `lr0 * decay^floor(epoch / every)`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Indices into the labeled and unlabeled pools of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// One epoch of mini-batches. Both pools are shuffled with an
/// epoch-derived seed; every unlabeled sample is visited once while the
/// labeled pool is cycled. Without unlabeled data an epoch is one pass over
/// the labeled pool.
pub fn make_batches(split: &DatasetSplit, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Batch>> {
    let n_l = split.labeled().len();
    let n_u = split.unlabeled().len();
    if n_l == 0 {
        return Err(Error::Config("the labeled pool is empty".into()));
    }
    if cfg.batch_labeled == 0 || cfg.batch_unlabeled == 0 {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    let mut rng = seed::rng(cfg.seed, &[0xba7c, epoch as u64]);
    let mut lab: Vec<usize> = (0..n_l).collect();
    lab.shuffle(&mut rng);
    let mut unl: Vec<usize> = (0..n_u).collect();
    unl.shuffle(&mut rng);
    if n_u == 0 {
        return Ok(lab
            .chunks(cfg.batch_labeled)
            .map(|c| Batch { labeled: c.to_vec(), unlabeled: Vec::new() })
            .collect());
    }
    let mut cursor = 0;
    Ok(unl
        .chunks(cfg.batch_unlabeled)
        .map(|u| {
            let labeled = (0..cfg.batch_labeled)
                .map(|_| {
                    let i = lab[cursor % n_l];
                    cursor += 1;
                    i
                })
                .collect();
            Batch { labeled, unlabeled: u.to_vec() }
        })
        .collect())
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub report: LossReport,
    /// Discriminator accuracy on the batch before its update, if it trained.
    pub disc_accuracy: Option<f64>,
}

/// Model parameters with separate Adam states for the model and the
/// discriminator.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    model_opt: Adam,
    disc_opt: Adam,
}

fn finite(v: f64, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {term} is {v}")))
    }
}

/// Frames of `seqs` prepared for the model with per-sample seeds.
fn prepare(seqs: &[&SkeletonSequence], frames: usize, seed: u64) -> Vec<Array3<f64>> {
    seqs.iter().map(|s| model_input(s, frames, sample_seed(seed, &s.id))).collect()
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_shape_fn((rows.len(), m.ncols()), |(i, j)| m[[rows[i], j]])
}

impl TrainState {
    pub fn new(bundle: ModelBundle) -> Self {
        let model_opt = Adam::new(Group::Model, &bundle.params);
        let disc_opt = Adam::new(Group::Discriminator, &bundle.params);
        Self { bundle, model_opt, disc_opt }
    }

    /// One discriminator update on fixed features; ascends the adversarial
    /// objective. Returns the pre-update accuracy.
    pub fn discriminator_step(&mut self, labeled: &Mat, unlabeled: &Mat, lr: f64) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let p = self.bundle.params.bind(&mut tape, &[Group::Discriminator]);
        let l = tape.constant(labeled.clone());
        let u = tape.constant(unlabeled.clone());
        let dl = self.bundle.discriminate_on_tape(&mut tape, &p, l);
        let du = self.bundle.discriminate_on_tape(&mut tape, &p, u);
        let adv = losses::adversarial_on_tape(&mut tape, dl, du);
        let bce = tape.scale(adv, -1.0);
        let value = finite(tape.scalar(bce), "discriminator cross-entropy")?;
        let correct = tape.value(dl).iter().filter(|&&s| s > 0.5).count() + tape.value(du).iter().filter(|&&s| s < 0.5).count();
        let accuracy = correct as f64 / (labeled.nrows() + unlabeled.nrows()) as f64;
        let mut grads = tape.backward(bce);
        let g = p.gradients(&mut grads);
        self.disc_opt.step(&mut self.bundle.params, &g, lr);
        Ok((accuracy, value))
    }

    /// Discriminator update (when the adversarial term is on) followed by a
    /// model update on the total objective with the discriminator frozen.
    pub fn train_step(
        &mut self,
        split: &DatasetSplit,
        batch: &Batch,
        bank: Option<&FeatureBank>,
        cfg: &TrainConfig,
        lr: f64,
        step_seed: u64,
    ) -> Result<StepReport> {
        let terms = cfg.strategy.name.terms();
        let t = cfg.frames;
        let labeled: Vec<&SkeletonSequence> = batch.labeled.iter().map(|&i| &split.labeled()[i]).collect();
        let labels = labeled
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::Contract(format!("labeled sample {} has no label", s.id))))
            .collect::<Result<Vec<_>>>()?;
        let use_unlabeled = terms.uses_unlabeled() && !batch.unlabeled.is_empty();
        let unlabeled: Vec<&SkeletonSequence> = if use_unlabeled {
            batch.unlabeled.iter().map(|&i| &split.unlabeled()[i]).collect()
        } else {
            Vec::new()
        };
        let x_l = prepare(&labeled, t, step_seed);
        let x_u = prepare(&unlabeled, t, step_seed);
        let mut rng = seed::rng(step_seed, &[0x3a5c]);
        let masked = if terms.inpainting {
            x_u.iter()
                .map(|x| apply_mask(x, MaskSpec::random(t, cfg.mask_fraction, &mut rng)).map(|m| m.0))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (nl, nu, nm) = (x_l.len(), x_u.len(), masked.len());

        let bundle = &self.bundle;
        let mut tape = Tape::new();
        let mut p = bundle.params.bind(&mut tape, &[Group::Model]);
        let all: Vec<&Array3<f64>> = x_l.iter().chain(&x_u).chain(&masked).collect();
        let xs = tape.constant(batch_matrix(&all));
        let h = bundle.encode_on_tape(&mut tape, &p, xs, t, nl + nu + nm);
        let h_lu = tape.rows(h, 0, nl + nu);
        let hbar = bundle.translate_on_tape(&mut tape, &p, h_lu);
        let hbar_l = tape.rows(hbar, 0, nl);
        let probs_l = bundle.classify_on_tape(&mut tape, &p, hbar_l);
        let l_sup = losses::cross_entropy_on_tape(&mut tape, probs_l, &labels)?;

        let mut comp = LossComponents { l_sup: finite(tape.scalar(l_sup), "l_sup")?, ..LossComponents::default() };
        let mut unl_terms: Vec<Var> = Vec::new();
        let mut extra_terms: Vec<Var> = Vec::new();
        let mut adv_term = None;
        let mut disc_accuracy = None;

        if nu > 0 {
            let hbar_u = tape.rows(hbar, nl, nu);
            let probs_u = bundle.classify_on_tape(&mut tape, &p, hbar_u);

            if terms.inpainting {
                let h_m = tape.rows(h, nl + nu, nm);
                let masked_refs: Vec<&Array3<f64>> = masked.iter().collect();
                let xm = tape.constant(batch_matrix(&masked_refs));
                let recon = bundle.decode_on_tape(&mut tape, &p, h_m, xm, t, nm);
                let orig_refs: Vec<&Array3<f64>> = x_u.iter().collect();
                let orig = tape.constant(batch_matrix(&orig_refs));
                let l_inp = losses::mse_on_tape(&mut tape, recon, orig);
                comp.l_inp = finite(tape.scalar(l_inp), "l_inp")?;
                unl_terms.push(l_inp);
            }

            if terms.neighborhood {
                let bank = bank.ok_or_else(|| Error::Config("the neighbourhood term needs a feature bank".into()))?;
                let k = cfg.k;
                let feats = bank.unlabeled_features();
                let hu = tape.value(hbar_u).clone();
                let mut nbr_rows = Vec::with_capacity(nu * k);
                let mut pos_rows = Vec::new();
                let mut pos_anchor = Vec::new();
                for (i, s) in unlabeled.iter().enumerate() {
                    let ns = knn_query(bank, &s.id, hu.row(i), k)?;
                    let pos = select_positive(&ns, bank)?;
                    pos_anchor.extend(std::iter::repeat_n(i, pos.rows.len()));
                    pos_rows.extend(pos.rows);
                    nbr_rows.extend(ns.rows);
                }
                let nbrs = tape.constant(gather_rows(feats, &nbr_rows));
                let (_, center_u) = attention_center_on_tape(bundle, &mut tape, &p, hbar_u, nbrs, k);
                let pc = bundle.classify_on_tape(&mut tape, &p, center_u);
                let target = if cfg.kl_target_stop_gradient { tape.detach(pc) } else { pc };
                let mut kl = losses::kl_sum_on_tape(&mut tape, target, probs_u);
                if !pos_rows.is_empty() {
                    let pf = tape.constant(gather_rows(feats, &pos_rows));
                    let pp = bundle.classify_on_tape(&mut tape, &p, pf);
                    let tg = tape.gather(target, &pos_anchor);
                    let kl_pos = losses::kl_sum_on_tape(&mut tape, tg, pp);
                    kl = tape.add(kl, kl_pos);
                }
                let l_kl = tape.scale(kl, 1.0 / nu as f64);
                comp.l_kl = finite(tape.scalar(l_kl), "l_kl")?;
                unl_terms.push(l_kl);

                let hl = tape.value(hbar_l).clone();
                let mut lab_rows = Vec::with_capacity(nl * k);
                for (i, s) in labeled.iter().enumerate() {
                    lab_rows.extend(knn_query(bank, &s.id, hl.row(i), k)?.rows);
                }
                let lnbrs = tape.constant(gather_rows(feats, &lab_rows));
                let (_, center_l) = attention_center_on_tape(bundle, &mut tape, &p, hbar_l, lnbrs, k);
                let pcl = bundle.classify_on_tape(&mut tape, &p, center_l);
                let l_ce = losses::cross_entropy_on_tape(&mut tape, pcl, &labels)?;
                comp.l_ce_center = finite(tape.scalar(l_ce), "l_ce_center")?;
                unl_terms.push(l_ce);
            }

            if terms.vat {
                let refs: Vec<&Array3<f64>> = x_u.iter().collect();
                let xs_u = batch_matrix(&refs);
                let clean = tape.value(probs_u).clone();
                let l_vat =
                    baselines::vat_on_tape(bundle, &mut tape, &p, &xs_u, t, nu, &clean, cfg.strategy.vat(), &mut rng);
                comp.l_vat = finite(tape.scalar(l_vat), "l_vat")?;
                extra_terms.push(l_vat);
            }

            if terms.entmin {
                let l_ent = losses::entropy_on_tape(&mut tape, probs_u);
                comp.l_entmin = finite(tape.scalar(l_ent), "l_entmin")?;
                extra_terms.push(l_ent);
            }

            if terms.adversarial {
                let fl = tape.value(hbar_l).clone();
                let fu = tape.value(hbar_u).clone();
                let mut acc = 0.0;
                for i in 0..cfg.disc_steps {
                    let (a, _) = self.discriminator_step(&fl, &fu, lr)?;
                    if i == 0 {
                        acc = a;
                    }
                }
                disc_accuracy = Some(acc);
                let bundle = &self.bundle;
                p.rebind_constants(&mut tape, &bundle.params, Group::Discriminator);
                let dl = bundle.discriminate_on_tape(&mut tape, &p, hbar_l);
                let du = bundle.discriminate_on_tape(&mut tape, &p, hbar_u);
                let l_adv = losses::adversarial_on_tape(&mut tape, dl, du);
                comp.l_adv = finite(tape.scalar(l_adv), "l_adv")?;
                adv_term = Some(l_adv);
            }
        }

        let report = losses::total_objective(comp, cfg.lambda1, cfg.lambda2)?;
        finite(report.total, "total")?;

        let mut loss = l_sup;
        if !unl_terms.is_empty() {
            let mut u = unl_terms[0];
            for &v in &unl_terms[1..] {
                u = tape.add(u, v);
            }
            let u = tape.scale(u, cfg.lambda1);
            loss = tape.add(loss, u);
        }
        if let Some(a) = adv_term {
            let a = tape.scale(a, cfg.lambda2);
            loss = tape.add(loss, a);
        }
        for v in extra_terms {
            loss = tape.add(loss, v);
        }
        let mut grads = tape.backward(loss);
        let g = p.gradients(&mut grads);
        self.model_opt.step(&mut self.bundle.params, &g, lr);
        if !self.bundle.params.all_finite() {
            return Err(Error::NonFinite("model parameters after update".into()));
        }
        Ok(StepReport { report, disc_accuracy })
    }
}

/// Fraction of `test` whose argmax prediction matches its label. Frames are
/// sampled with per-sample seeds derived from `seed`.
pub fn evaluate(bundle: &ModelBundle, test: &[SkeletonSequence], frames: usize, seed: u64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty test set".into()));
    }
    let inputs: Vec<Array3<f64>> = test.iter().map(|s| model_input(s, frames, sample_seed(seed, &s.id))).collect();
    let preds = bundle.predict(&inputs)?;
    let mut correct = 0usize;
    for (s, p) in test.iter().zip(&preds) {
        let label = s.label.ok_or_else(|| Error::Contract(format!("test sample {} has no label", s.id)))?;
        correct += usize::from(p.argmax() == label);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-epoch record. `wall_seconds` is kept out of the CSV so that metric
/// files of identical runs are byte-identical; see [`write_timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
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
    pub train_disc_accuracy: f64,
    pub test_accuracy: f64,
    pub neighbor_quality_ratio: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 16] = [
    "epoch",
    "lr",
    "l_sup",
    "l_kl",
    "l_ce_center",
    "l_inp",
    "l_unlabeled",
    "l_adv",
    "l_vat",
    "l_entmin",
    "total",
    "lambda1",
    "lambda2",
    "train_disc_accuracy",
    "test_accuracy",
    "neighbor_quality_ratio",
];

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// `epoch,wall_seconds` per epoch.
pub fn write_timings(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "wall_seconds"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.wall_seconds.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// `anchor_id,neighbor_id,distance,is_positive` for every neighbour pair.
pub fn write_neighbor_dump(path: &Path, sets: &[NeighborSet], bank: &FeatureBank) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["anchor_id", "neighbor_id", "distance", "is_positive"]).map_err(csv_err)?;
    for ns in sets {
        let pos = select_positive(ns, bank)?;
        for (id, d) in ns.neighbor_ids.iter().zip(&ns.distances) {
            let is_pos = pos.positive_ids.contains(id);
            w.write_record([ns.anchor_id.as_str(), id, &d.to_string(), if is_pos { "true" } else { "false" }])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Where and what to persist during a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Metrics, timings, the best checkpoint and neighbour dumps go here.
    pub out_dir: Option<PathBuf>,
    pub dump_neighbors: bool,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub final_bundle: ModelBundle,
    pub best_bundle: ModelBundle,
    pub best_accuracy: f64,
    /// `None` when the initial model was never beaten.
    pub best_epoch: Option<usize>,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

pub fn run_experiment(cfg: &TrainConfig, split: &DatasetSplit) -> Result<ExperimentResult> {
    run_experiment_with(cfg, split, &RunOptions::default())
}

/// Trains under `cfg` on `split`, evaluating on the split's test set after
/// every epoch. Pseudo-labelling runs its supervised stage, relabels the
/// unlabeled pool and retrains from scratch; its reported rows are those of
/// the last stage.
pub fn run_experiment_with(cfg: &TrainConfig, split: &DatasetSplit, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    if split.test().is_empty() {
        return Err(Error::Config("the split has no test set".into()));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let result = if cfg.strategy.name == Strategy::PseudoLabels {
        let sup = TrainConfig { strategy: StrategySpec::new(Strategy::SupervisedOnly), ..cfg.clone() };
        let quiet = RunOptions { out_dir: None, ..opts.clone() };
        let rounds = cfg.strategy.get("rounds") as usize;
        let threshold = cfg.strategy.get("confidence_threshold");
        let mut current = train_once(&sup, split, &quiet, 0)?;
        for round in 1..=rounds {
            let relabeled = baselines::pseudo_label_round(
                &current.final_bundle,
                split,
                threshold,
                cfg.frames,
                seed::derive(cfg.seed, &[0x95e0, round as u64]),
            )?;
            let stage_opts = if round == rounds { opts.clone() } else { quiet.clone() };
            current = train_once(&sup, &relabeled, &stage_opts, round as u64)?;
        }
        current
    } else {
        train_once(cfg, split, opts, 0)?
    };
    if let Some(dir) = &opts.out_dir {
        write_metrics_csv(&dir.join(METRICS_FILE), &result.rows)?;
        write_timings(&dir.join(TIMINGS_FILE), &result.rows)?;
        checkpoint::save(&result.best_bundle, cfg.frames, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(result)
}

fn mean_report(reports: &[LossReport], cfg: &TrainConfig) -> Result<LossReport> {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let comp = LossComponents {
        l_sup: avg(|r| r.l_sup),
        l_kl: avg(|r| r.l_kl),
        l_ce_center: avg(|r| r.l_ce_center),
        l_inp: avg(|r| r.l_inp),
        l_adv: avg(|r| r.l_adv),
        l_vat: avg(|r| r.l_vat),
        l_entmin: avg(|r| r.l_entmin),
    };
    losses::total_objective(comp, cfg.lambda1, cfg.lambda2)
}

/// Frame-sampling seed used by evaluation for a run seeded with `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed::derive(seed, &[0xe7a1])
}

/// Frame-sampling seed used by the feature bank for a run seeded with `seed`.
pub fn bank_seed(seed: u64) -> u64 {
    seed::derive(seed, &[0xba4c])
}

fn train_once(cfg: &TrainConfig, split: &DatasetSplit, opts: &RunOptions, stage: u64) -> Result<ExperimentResult> {
    let model_cfg = cfg.model_config(split.num_joints(), split.classes());
    let bundle = ModelBundle::new(model_cfg, seed::derive(cfg.seed, &[0x30de, stage]))?;
    let eval_seed = eval_seed(cfg.seed);
    let bank_seed = bank_seed(cfg.seed);
    let terms = cfg.strategy.name.terms();
    let truth = split.evaluation_labels();

    let mut state = TrainState::new(bundle);
    let mut best_accuracy = evaluate(&state.bundle, split.test(), cfg.frames, eval_seed)?;
    let mut best_bundle = state.bundle.clone();
    let mut best_epoch = None;
    let mut bank = if terms.neighborhood && !split.unlabeled().is_empty() {
        Some(rebuild_bank(&state.bundle, split, cfg.frames, bank_seed, 0)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = learning_rate(cfg, epoch);
        let batches = make_batches(split, cfg, epoch)?;
        let mut reports = Vec::with_capacity(batches.len());
        let mut disc = Vec::new();
        for (s, batch) in batches.iter().enumerate() {
            let step_seed = seed::derive(cfg.seed, &[0x57e9, stage, epoch as u64, s as u64]);
            let out = state.train_step(split, batch, bank.as_ref(), cfg, lr, step_seed)?;
            reports.push(out.report);
            disc.extend(out.disc_accuracy);
        }
        let report = mean_report(&reports, cfg)?;

        let post = rebuild_bank(&state.bundle, split, cfg.frames, bank_seed, epoch + 1)?;
        let nqr = if split.unlabeled().len() > cfg.k {
            let sets = unlabeled_neighborhoods(&post, cfg.k)?;
            if opts.dump_neighbors {
                if let Some(dir) = &opts.out_dir {
                    write_neighbor_dump(&dir.join(format!("neighbors_epoch{epoch:03}.csv")), &sets, &post)?;
                }
            }
            neighbor_quality_ratio(&sets, &truth)
        } else {
            0.0
        };
        if terms.neighborhood {
            bank = Some(post);
        }

        let accuracy = evaluate(&state.bundle, split.test(), cfg.frames, eval_seed)?;
        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            best_bundle = state.bundle.clone();
            best_epoch = Some(epoch);
        }
        let row = MetricsRow {
            epoch,
            lr,
            l_sup: report.l_sup,
            l_kl: report.l_kl,
            l_ce_center: report.l_ce_center,
            l_inp: report.l_inp,
            l_unlabeled: report.l_unlabeled,
            l_adv: report.l_adv,
            l_vat: report.l_vat,
            l_entmin: report.l_entmin,
            total: report.total,
            lambda1: report.lambda1,
            lambda2: report.lambda2,
            train_disc_accuracy: if disc.is_empty() { 0.0 } else { disc.iter().sum::<f64>() / disc.len() as f64 },
            test_accuracy: accuracy,
            neighbor_quality_ratio: nqr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if opts.progress {
            eprintln!(
                "[{}] epoch {:>3} lr {:.6} total {:.4} sup {:.4} acc {:.3} nqr {:.3} ({:.1}s)",
                cfg.strategy.name, epoch, lr, row.total, row.l_sup, row.test_accuracy, row.neighbor_quality_ratio, row.wall_seconds
            );
        }
        rows.push(row);
    }
    Ok(ExperimentResult { final_bundle: state.bundle, best_bundle, best_accuracy, best_epoch, rows })
}
