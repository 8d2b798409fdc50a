//! Skeleton sequences and everything needed to turn them into model input:
//! JSON-lines I/O, stratified labeled/unlabeled splits, temporal frame
//! sampling, span masking and a synthetic motion corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array3, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A time-ordered sequence of 3-D joint positions, shape `(frames, joints, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub frames: Array3<f64>,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(id: impl Into<String>, frames: Array3<f64>, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        let (t, j, c) = frames.dim();
        if t < 2 || j < 1 || c != 3 {
            return Err(Error::Schema(format!(
                "sequence {id}: frames must have shape (T>=2, J>=1, 3), got ({t}, {j}, {c})"
            )));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("sequence {id}: non-finite coordinate")));
        }
        Ok(Self { id, frames, label })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.frames.dim().1
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default)]
    label: Option<usize>,
    frames: Vec<Vec<Vec<f64>>>,
}

/// Reads a JSON-lines dataset, preserving file order.
pub fn load_dataset(path: &Path) -> Result<Vec<SkeletonSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut joints: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let t = rec.frames.len();
        let j = rec.frames.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(t * j * 3);
        for (fi, frame) in rec.frames.iter().enumerate() {
            if frame.len() != j {
                return Err(Error::Schema(format!(
                    "line {lineno}: frame {fi} has {} joints, expected {j}",
                    frame.len()
                )));
            }
            for (ji, joint) in frame.iter().enumerate() {
                if joint.len() != 3 {
                    return Err(Error::Schema(format!(
                        "line {lineno}: frame {fi} joint {ji} has {} coordinates, expected 3",
                        joint.len()
                    )));
                }
                flat.extend_from_slice(joint);
            }
        }
        match joints {
            Some(expected) if expected != j => {
                return Err(Error::Schema(format!(
                    "line {lineno}: record has {j} joints, earlier records have {expected}"
                )))
            }
            _ => joints = Some(j),
        }
        let frames = Array3::from_shape_vec((t, j, 3), flat).map_err(|e| Error::Schema(e.to_string()))?;
        let seq = SkeletonSequence::new(rec.id, frames, rec.label)
            .map_err(|e| Error::Schema(format!("line {lineno}: {e}")))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &[SkeletonSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for seq in data {
        let frames = seq
            .frames
            .outer_iter()
            .map(|f| f.outer_iter().map(|j| j.to_vec()).collect())
            .collect();
        let rec = Record { id: seq.id.clone(), label: seq.label, frames };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth labels for evaluation-only diagnostics.
///
/// Training code never receives this; it is handed out by
/// [`DatasetSplit::evaluation_labels`] to metrics and exports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalLabels(HashMap<String, usize>);

impl EvalLabels {
    pub fn from_pairs<I: IntoIterator<Item = (String, usize)>>(pairs: I) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.0.get(id).copied()
    }
}

/// Labeled / unlabeled / test partition of a corpus.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    labeled: Vec<SkeletonSequence>,
    unlabeled: Vec<SkeletonSequence>,
    test: Vec<SkeletonSequence>,
    fraction: f64,
    classes: usize,
    hidden: HashMap<String, usize>,
}

fn class_count(data: &[SkeletonSequence]) -> Result<usize> {
    let mut max = 0;
    for seq in data {
        let label = seq
            .label
            .ok_or_else(|| Error::Split(format!("sequence {} has no label", seq.id)))?;
        max = max.max(label);
    }
    Ok(max + 1)
}

/// Stratified random selection of `round(fraction * n_c)` labeled samples
/// per class; everything else becomes unlabeled. The test set starts empty
/// (see [`DatasetSplit::with_test`]).
pub fn make_split(data: &[SkeletonSequence], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Split(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if data.is_empty() {
        return Err(Error::Split("empty dataset".into()));
    }
    let classes = class_count(data)?;
    let mut seen = HashSet::new();
    for seq in data {
        if !seen.insert(seq.id.as_str()) {
            return Err(Error::Split(format!("duplicate sample id {}", seq.id)));
        }
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seq) in data.iter().enumerate() {
        by_class.entry(seq.label.unwrap_or_default()).or_default().push(i);
    }
    let mut is_labeled = vec![false; data.len()];
    for (&class, members) in &by_class {
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::Split(format!(
                "fraction {fraction} leaves class {class} ({} samples) without a labeled example",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut seed::rng(seed, &[0x5e11, class as u64]));
        for &i in &shuffled[..take] {
            is_labeled[i] = true;
        }
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut hidden = HashMap::new();
    for (seq, lab) in data.iter().zip(is_labeled) {
        if lab {
            labeled.push(seq.clone());
        } else {
            hidden.insert(seq.id.clone(), seq.label.unwrap_or_default());
            unlabeled.push(SkeletonSequence { label: None, ..seq.clone() });
        }
    }
    Ok(DatasetSplit { labeled, unlabeled, test: Vec::new(), fraction, classes, hidden })
}

/// Stratified train/test holdout: `round(test_fraction * n_c)` per class go
/// to the test side.
pub fn holdout(
    data: &[SkeletonSequence],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Split(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    class_count(data)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seq) in data.iter().enumerate() {
        by_class.entry(seq.label.unwrap_or_default()).or_default().push(i);
    }
    let mut is_test = vec![false; data.len()];
    for (&class, members) in &by_class {
        let take = (test_fraction * members.len() as f64).round() as usize;
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut seed::rng(seed, &[0x7e57, class as u64]));
        for &i in &shuffled[..take] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = data.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|p| p.0).collect(), test.into_iter().map(|p| p.0).collect()))
}

impl DatasetSplit {
    /// Attaches a labeled test set disjoint from the training pools.
    pub fn with_test(mut self, test: Vec<SkeletonSequence>) -> Result<Self> {
        let train_ids: HashSet<&str> = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|s| s.id.as_str())
            .collect();
        for seq in &test {
            let label = seq
                .label
                .ok_or_else(|| Error::Split(format!("test sequence {} has no label", seq.id)))?;
            if label >= self.classes {
                return Err(Error::Split(format!(
                    "test sequence {} has label {label}, dataset has {} classes",
                    seq.id, self.classes
                )));
            }
            if train_ids.contains(seq.id.as_str()) {
                return Err(Error::Split(format!("test sequence {} also in training pools", seq.id)));
            }
        }
        self.test = test;
        Ok(self)
    }

    pub fn labeled(&self) -> &[SkeletonSequence] {
        &self.labeled
    }

    /// Unlabeled pool; labels are stripped.
    pub fn unlabeled(&self) -> &[SkeletonSequence] {
        &self.unlabeled
    }

    pub fn test(&self) -> &[SkeletonSequence] {
        &self.test
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_joints(&self) -> usize {
        self.labeled.first().map_or(0, SkeletonSequence::num_joints)
    }

    /// Ground truth for every sample, including the hidden unlabeled ones.
    /// Evaluation and diagnostics only.
    pub fn evaluation_labels(&self) -> EvalLabels {
        let visible = self
            .labeled
            .iter()
            .chain(&self.test)
            .filter_map(|s| s.label.map(|l| (s.id.clone(), l)));
        let hidden = self.hidden.iter().map(|(k, v)| (k.clone(), *v));
        EvalLabels::from_pairs(visible.chain(hidden))
    }

    /// Returns a split whose labeled pool is extended with `extra`, which
    /// are removed from the unlabeled pool. Used by pseudo-labelling.
    pub fn with_extra_labels(&self, extra: &[(String, usize)]) -> Self {
        let assign: HashMap<&str, usize> = extra.iter().map(|(id, l)| (id.as_str(), *l)).collect();
        let mut labeled = self.labeled.clone();
        let mut unlabeled = Vec::new();
        for seq in &self.unlabeled {
            match assign.get(seq.id.as_str()) {
                Some(&l) => labeled.push(SkeletonSequence { label: Some(l), ..seq.clone() }),
                None => unlabeled.push(seq.clone()),
            }
        }
        Self {
            labeled,
            unlabeled,
            test: self.test.clone(),
            fraction: self.fraction,
            classes: self.classes,
            hidden: self.hidden.clone(),
        }
    }
}

/// Indices of `target` frames drawn from a sequence of `available` frames,
/// sorted ascending. Short sequences are tiled cyclically before drawing.
pub fn sample_indices(available: usize, target: usize, rng: &mut seed::Rng) -> Vec<usize> {
    assert!(available >= 1 && target >= 1, "sample_indices: empty input or target");
    let copies = target.div_ceil(available);
    let pool = copies * available;
    let mut picked: Vec<usize> = index::sample(rng, pool, target).into_iter().map(|i| i % available).collect();
    picked.sort_unstable();
    picked
}

/// Uniform random temporal subsample of `target` frames, temporal order kept.
pub fn sample_frames(seq: &SkeletonSequence, target: usize, seed: u64) -> Array3<f64> {
    let mut rng = seed::rng(seed, &[0xf7a3]);
    let idx = sample_indices(seq.num_frames(), target, &mut rng);
    seq.frames.select(Axis(0), &idx)
}

/// Translates a sequence so the joint centroid of its first frame is the
/// origin.
pub fn center_on_first_frame(frames: &Array3<f64>) -> Array3<f64> {
    let centroid = frames.slice(s![0, .., ..]).mean_axis(Axis(0)).expect("at least one joint");
    let mut out = frames.clone();
    for mut frame in out.outer_iter_mut() {
        for mut joint in frame.outer_iter_mut() {
            joint -= &centroid;
        }
    }
    out
}

/// The model-facing view of a sequence: centred on its first frame, then
/// temporally subsampled to `frames` frames with the given seed.
pub fn model_input(seq: &SkeletonSequence, frames: usize, seed: u64) -> Array3<f64> {
    let centred = SkeletonSequence { frames: center_on_first_frame(&seq.frames), ..seq.clone() };
    sample_frames(&centred, frames, seed)
}

/// A contiguous span of masked frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub start: usize,
    pub length: usize,
}

impl MaskSpec {
    pub fn new(start: usize, length: usize, frames: usize) -> Result<Self> {
        let m = Self { start, length };
        m.validate(frames)?;
        Ok(m)
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.length == 0 || self.start + self.length > frames {
            return Err(Error::Contract(format!(
                "mask [{}, {}) invalid for {frames} frames",
                self.start,
                self.start + self.length
            )));
        }
        Ok(())
    }

    /// A span of `max(1, round(fraction * frames))` frames at a uniform start.
    pub fn random(frames: usize, fraction: f64, rng: &mut seed::Rng) -> Self {
        let length = ((fraction * frames as f64).round() as usize).clamp(1, frames);
        let start = rng.random_range(0..=frames - length);
        Self { start, length }
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.length
    }
}

/// Zeroes the masked frames of `x`, returning a new array and the mask.
pub fn apply_mask(x: &Array3<f64>, m: MaskSpec) -> Result<(Array3<f64>, MaskSpec)> {
    m.validate(x.dim().0)?;
    let mut out = x.clone();
    out.slice_mut(s![m.start..m.start + m.length, .., ..]).fill(0.0);
    Ok((out, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub joints: usize,
    pub frames: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    /// Rotations about the vertical axis are drawn uniformly from
    /// `[-max_rotation_degrees, max_rotation_degrees]`.
    pub max_rotation_degrees: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { classes: 6, joints: 8, frames: 60, samples_per_class: 100, noise_scale: 0.25, max_rotation_degrees: 45.0, seed: 0 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.joints == 0 || self.frames < 2 || self.samples_per_class == 0 {
            return Err(Error::Config("joints, samples_per_class must be positive and frames >= 2".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_degrees) {
            return Err(Error::Config(format!("max_rotation_degrees must be in [0, 180], got {}", self.max_rotation_degrees)));
        }
        Ok(())
    }
}

const TEMPLATE_SEED: u64 = 0x5e1e_7a0d;

/// The deterministic motion family of one class: per joint a sinusoid with
/// class-specific amplitude, frequency and phase on every axis.
#[derive(Debug, Clone)]
pub struct ClassTemplate {
    rest: Vec<[f64; 3]>,
    amplitude: Vec<[f64; 3]>,
    frequency: Vec<f64>,
    phase: Vec<[f64; 3]>,
}

impl ClassTemplate {
    /// Templates depend only on `(class, joints)`, so corpora generated with
    /// different seeds share the same classes.
    pub fn new(class: usize, joints: usize) -> Self {
        let mut rng = seed::rng(TEMPLATE_SEED, &[class as u64, joints as u64]);
        let rest = (0..joints)
            .map(|j| {
                let angle = 2.0 * PI * j as f64 / joints as f64;
                let radius = 0.15 + 0.1 * (j % 3) as f64;
                [radius * angle.cos(), 0.2 + 1.4 * j as f64 / joints as f64, radius * angle.sin()]
            })
            .collect();
        let mut amplitude = Vec::with_capacity(joints);
        let mut frequency = Vec::with_capacity(joints);
        let mut phase = Vec::with_capacity(joints);
        for _ in 0..joints {
            let active = rng.random_bool(0.5);
            let scale = if active { 0.35 } else { 0.08 };
            amplitude.push(std::array::from_fn(|_| scale * rng.random_range(0.3..1.0)));
            frequency.push(rng.random_range(0.75..2.5));
            phase.push(std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)));
        }
        Self { rest, amplitude, frequency, phase }
    }

    /// Renders `frames` frames with a vertical-axis rotation, a temporal
    /// speed factor and Gaussian coordinate noise.
    pub fn render(&self, frames: usize, rotation: f64, speed: f64, noise: f64, rng: &mut seed::Rng) -> Array3<f64> {
        let joints = self.rest.len();
        let (sin, cos) = rotation.sin_cos();
        let gauss = Normal::new(0.0, noise.max(0.0)).expect("valid normal");
        let mut out = Array3::zeros((frames, joints, 3));
        for t in 0..frames {
            let tau = t as f64 / (frames - 1) as f64;
            for j in 0..joints {
                let p: [f64; 3] = std::array::from_fn(|a| {
                    self.rest[j][a]
                        + self.amplitude[j][a] * (2.0 * PI * self.frequency[j] * speed * tau + self.phase[j][a]).sin()
                });
                let rotated = [cos * p[0] + sin * p[2], p[1], -sin * p[0] + cos * p[2]];
                for a in 0..3 {
                    let n = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                    out[[t, j, a]] = rotated[a] + n;
                }
            }
        }
        out
    }
}

/// Synthetic corpus: `samples_per_class * classes` sequences, labels
/// assigned round-robin, each with a random rotation about the vertical
/// axis within `max_rotation_degrees` and a random speed factor in `[0.8, 1.25]`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SkeletonSequence>> {
    cfg.validate()?;
    let max_rotation = cfg.max_rotation_degrees.to_radians();
    let templates: Vec<_> = (0..cfg.classes).map(|c| ClassTemplate::new(c, cfg.joints)).collect();
    let total = cfg.classes * cfg.samples_per_class;
    (0..total)
        .map(|i| {
            let class = i % cfg.classes;
            let mut rng = seed::rng(cfg.seed, &[0x5a3b, i as u64]);
            let rotation = rng.random_range(-max_rotation..=max_rotation);
            let speed = rng.random_range(0.8..=1.25);
            let frames = templates[class].render(cfg.frames, rotation, speed, cfg.noise_scale, &mut rng);
            SkeletonSequence::new(format!("syn{}-{i:05}", cfg.seed), frames, Some(class))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, t: usize, label: usize) -> SkeletonSequence {
        let frames = Array3::from_shape_fn((t, 2, 3), |(a, b, c)| (a * 100 + b * 10 + c) as f64 + 1.0);
        SkeletonSequence::new(id, frames, Some(label)).unwrap()
    }

    fn corpus(per_class: usize, classes: usize) -> Vec<SkeletonSequence> {
        (0..per_class * classes).map(|i| seq(&format!("s{i}"), 3, i % classes)).collect()
    }

    #[test]
    fn load_minimal_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"label\":0,\"frames\":[[[1,2,3]],[[4,5,6]]]}\n").unwrap();
        let data = load_dataset(&path).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].frames.dim(), (2, 1, 3));
        assert_eq!(data[0].frames[[1, 0, 2]], 6.0);
    }

    #[test]
    fn load_rejects_two_wide_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"label\":0,\"frames\":[[[1,2]],[[4,5]]]}\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn load_reports_line_of_malformed_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = "{\"id\":\"a\",\"label\":0,\"frames\":[[[1,2,3]],[[4,5,6]]]}";
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_inconsistent_joint_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let a = "{\"id\":\"a\",\"label\":0,\"frames\":[[[1,2,3]],[[4,5,6]]]}";
        let b = "{\"id\":\"b\",\"label\":0,\"frames\":[[[1,2,3],[1,2,3]],[[4,5,6],[1,2,3]]]}";
        std::fs::write(&path, format!("{a}\n{b}\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_label_loads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"label\":null,\"frames\":[[[1,2,3]],[[4,5,6]]]}\n").unwrap();
        assert_eq!(load_dataset(&path).unwrap()[0].label, None);
    }

    #[test]
    fn split_takes_rounded_fraction_per_class() {
        let data = corpus(10, 3);
        let split = make_split(&data, 0.4, 1).unwrap();
        for c in 0..3 {
            assert_eq!(split.labeled().iter().filter(|s| s.label == Some(c)).count(), 4);
        }
        assert_eq!(split.unlabeled().len(), 18);
        assert!(split.unlabeled().iter().all(|s| s.label.is_none()));
        let truth = split.evaluation_labels();
        assert!(split.unlabeled().iter().all(|s| truth.get(&s.id).is_some()));
    }

    #[test]
    fn full_fraction_leaves_nothing_unlabeled() {
        let split = make_split(&corpus(5, 2), 1.0, 0).unwrap();
        assert!(split.unlabeled().is_empty());
        assert_eq!(split.labeled().len(), 10);
    }

    #[test]
    fn split_is_deterministic() {
        let data = corpus(20, 4);
        let a = make_split(&data, 0.25, 9).unwrap();
        let b = make_split(&data, 0.25, 9).unwrap();
        let ids = |s: &DatasetSplit| s.labeled().iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn tiny_fraction_is_a_split_error() {
        assert!(matches!(make_split(&corpus(10, 2), 0.01, 0), Err(Error::Split(_))));
    }

    #[test]
    fn test_set_must_be_disjoint() {
        let data = corpus(4, 2);
        let split = make_split(&data, 0.5, 0).unwrap();
        assert!(split.clone().with_test(vec![data[0].clone()]).is_err());
        assert!(split.with_test(vec![seq("fresh", 3, 1)]).is_ok());
    }

    #[test]
    fn holdout_is_stratified() {
        let (train, test) = holdout(&corpus(9, 3), 1.0 / 3.0, 4).unwrap();
        assert_eq!(train.len(), 18);
        for c in 0..3 {
            assert_eq!(test.iter().filter(|s| s.label == Some(c)).count(), 3);
        }
    }

    #[test]
    fn sampling_all_frames_is_identity() {
        let s = seq("a", 40, 0);
        assert_eq!(sample_frames(&s, 40, 3), s.frames);
    }

    #[test]
    fn short_sequences_are_tiled() {
        let mut rng = seed::rng(0, &[]);
        let idx = sample_indices(5, 10, &mut rng);
        assert_eq!(idx, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn sampled_indices_are_sorted_for_many_seeds() {
        for s in 0..100 {
            let mut rng = seed::rng(s, &[]);
            let idx = sample_indices(60, 40, &mut rng);
            assert_eq!(idx.len(), 40);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let idx = sample_indices(7, 40, &mut rng);
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn centering_moves_first_centroid_to_origin() {
        let s = seq("a", 4, 0);
        let c = center_on_first_frame(&s.frames);
        let centroid = c.slice(s![0, .., ..]).mean_axis(Axis(0)).unwrap();
        assert!(centroid.iter().all(|x| x.abs() < 1e-12));
        assert_eq!(c[[3, 1, 2]] - c[[0, 1, 2]], s.frames[[3, 1, 2]] - s.frames[[0, 1, 2]]);
    }

    #[test]
    fn full_mask_zeroes_everything() {
        let s = seq("a", 5, 0);
        let (m, _) = apply_mask(&s.frames, MaskSpec::new(0, 5, 5).unwrap()).unwrap();
        assert!(m.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_frame_mask_touches_only_frame_zero() {
        let s = seq("a", 5, 0);
        let (m, _) = apply_mask(&s.frames, MaskSpec::new(0, 1, 5).unwrap()).unwrap();
        assert!(m.slice(s![0, .., ..]).iter().all(|&x| x == 0.0));
        assert_eq!(m.slice(s![1.., .., ..]), s.frames.slice(s![1.., .., ..]));
    }

    #[test]
    fn masking_is_idempotent_and_leaves_input_alone() {
        let s = seq("a", 6, 0);
        let spec = MaskSpec::new(2, 3, 6).unwrap();
        let (once, _) = apply_mask(&s.frames, spec).unwrap();
        let (twice, _) = apply_mask(&once, spec).unwrap();
        assert_eq!(once, twice);
        assert_eq!(s.frames, seq("a", 6, 0).frames);
        for t in 0..6 {
            if !spec.contains(t) {
                assert_eq!(once.slice(s![t, .., ..]), s.frames.slice(s![t, .., ..]));
            }
        }
    }

    #[test]
    fn invalid_masks_are_rejected() {
        assert!(MaskSpec::new(0, 0, 5).is_err());
        assert!(MaskSpec::new(3, 3, 5).is_err());
        let mut rng = seed::rng(1, &[]);
        for _ in 0..50 {
            let m = MaskSpec::random(40, 0.25, &mut rng);
            assert_eq!(m.length, 10);
            assert!(m.validate(40).is_ok());
        }
    }

    #[test]
    fn synthetic_counts_and_round_robin_labels() {
        let cfg = SyntheticConfig { classes: 6, joints: 4, frames: 10, samples_per_class: 10, noise_scale: 0.01, max_rotation_degrees: 180.0, seed: 1 };
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.len(), 60);
        for c in 0..6 {
            assert_eq!(data.iter().filter(|s| s.label == Some(c)).count(), 10);
        }
        assert_eq!(data[7].label, Some(1));
    }

    #[test]
    fn noiseless_render_is_deterministic_in_rotation_and_speed() {
        let t = ClassTemplate::new(2, 5);
        let mut r1 = seed::rng(1, &[]);
        let mut r2 = seed::rng(2, &[]);
        assert_eq!(t.render(20, 0.7, 1.1, 0.0, &mut r1), t.render(20, 0.7, 1.1, 0.0, &mut r2));
    }

    #[test]
    fn invalid_synthetic_config_is_rejected() {
        let cfg = SyntheticConfig { classes: 1, ..SyntheticConfig::default() };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
