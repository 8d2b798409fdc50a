//! Relations between samples in translated-feature space: a feature bank
//! over the training pools, exact KNN over the unlabeled pool,
//! attention-weighted local centres and positive-neighbour selection by
//! 1-nearest labeled lookup.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::{model_input, DatasetSplit, EvalLabels};
use crate::error::{Error, Result};
use crate::models::{ModelBundle, TranslatedFeature};
use crate::seed;
use crate::tape::{Mat, Tape, Var};
use crate::nn::Bound;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pool {
    Labeled,
    Unlabeled,
}

/// Translated features of every training sample, rebuilt once per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    unlabeled_ids: Vec<String>,
    unlabeled: Mat,
    labeled_ids: Vec<String>,
    labeled: Mat,
    labels: Vec<usize>,
    index: HashMap<String, (Pool, usize)>,
    /// Label of the nearest labeled feature for each unlabeled row.
    nearest_label: Vec<Option<usize>>,
    pub built_at_epoch: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_distance_then_id(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

impl FeatureBank {
    pub fn new(
        unlabeled_ids: Vec<String>,
        unlabeled: Mat,
        labeled_ids: Vec<String>,
        labeled: Mat,
        labels: Vec<usize>,
        built_at_epoch: usize,
    ) -> Result<Self> {
        if unlabeled_ids.len() != unlabeled.nrows()
            || labeled_ids.len() != labeled.nrows()
            || labels.len() != labeled_ids.len()
        {
            return Err(Error::Contract("feature bank ids, rows and labels disagree".into()));
        }
        if unlabeled.ncols() != labeled.ncols() && unlabeled.nrows() > 0 && labeled.nrows() > 0 {
            return Err(Error::Contract("feature bank pools have different widths".into()));
        }
        let mut index = HashMap::with_capacity(unlabeled_ids.len() + labeled_ids.len());
        for (i, id) in unlabeled_ids.iter().enumerate() {
            if index.insert(id.clone(), (Pool::Unlabeled, i)).is_some() {
                return Err(Error::Contract(format!("sample {id} appears twice in the feature bank")));
            }
        }
        for (i, id) in labeled_ids.iter().enumerate() {
            if index.insert(id.clone(), (Pool::Labeled, i)).is_some() {
                return Err(Error::Contract(format!("sample {id} appears twice in the feature bank")));
            }
        }
        let mut bank = Self {
            unlabeled_ids,
            unlabeled,
            labeled_ids,
            labeled,
            labels,
            index,
            nearest_label: Vec::new(),
            built_at_epoch,
        };
        bank.nearest_label = (0..bank.unlabeled.nrows())
            .map(|r| bank.nearest_labeled_label(bank.unlabeled.row(r)))
            .collect();
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.unlabeled_ids.len() + self.labeled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.unlabeled.ncols().max(self.labeled.ncols())
    }

    pub fn unlabeled_ids(&self) -> &[String] {
        &self.unlabeled_ids
    }

    pub fn labeled_ids(&self) -> &[String] {
        &self.labeled_ids
    }

    pub fn unlabeled_features(&self) -> &Mat {
        &self.unlabeled
    }

    pub fn labeled_features(&self) -> &Mat {
        &self.labeled
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, id: &str) -> Option<ArrayView1<'_, f64>> {
        self.index.get(id).map(|&(pool, row)| match pool {
            Pool::Labeled => self.labeled.row(row),
            Pool::Unlabeled => self.unlabeled.row(row),
        })
    }

    /// Label of the nearest labeled feature (Euclidean, ties by id).
    pub fn nearest_labeled_label(&self, feature: ArrayView1<f64>) -> Option<usize> {
        (0..self.labeled_ids.len())
            .map(|i| (sq_dist(feature, self.labeled.row(i)), self.labeled_ids[i].as_str(), i))
            .min_by(|a, b| by_distance_then_id(&(a.0, a.1), &(b.0, b.1)))
            .map(|(_, _, i)| self.labels[i])
    }
}

/// Seed used to sample the frames of sample `id` for the bank.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    seed::derive(seed, &[seed::hash_str(id)])
}

/// Encodes and translates every training sample under the current
/// parameters, sampling frames with a fixed per-sample seed.
pub fn rebuild_bank(bundle: &ModelBundle, split: &DatasetSplit, frames: usize, seed: u64, epoch: usize) -> Result<FeatureBank> {
    let encode = |pool: &[crate::data::SkeletonSequence]| -> Result<Mat> {
        if pool.is_empty() {
            return Ok(Array2::zeros((0, bundle.feature_width())));
        }
        let inputs: Vec<_> = pool.iter().map(|s| model_input(s, frames, sample_seed(seed, &s.id))).collect();
        bundle.translated_features(&inputs)
    };
    let unlabeled = encode(split.unlabeled())?;
    let labeled = encode(split.labeled())?;
    FeatureBank::new(
        split.unlabeled().iter().map(|s| s.id.clone()).collect(),
        unlabeled,
        split.labeled().iter().map(|s| s.id.clone()).collect(),
        labeled,
        split.labeled().iter().map(|s| s.label.unwrap_or_default()).collect(),
        epoch,
    )
}

/// The K nearest unlabeled samples of an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub anchor_id: String,
    pub neighbor_ids: Vec<String>,
    /// Euclidean distances, ascending.
    pub distances: Vec<f64>,
    /// Rows of the neighbours in the bank's unlabeled matrix.
    pub rows: Vec<usize>,
}

/// Exact KNN over the unlabeled pool, excluding the anchor itself. Ties are
/// broken by ascending sample id.
pub fn knn_query(bank: &FeatureBank, anchor_id: &str, anchor: ArrayView1<f64>, k: usize) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::Config("neighbourhood size K must be at least 1".into()));
    }
    if anchor.len() != bank.width() {
        return Err(Error::Contract(format!("anchor width {} differs from bank width {}", anchor.len(), bank.width())));
    }
    let mut candidates: Vec<(f64, &str, usize)> = bank
        .unlabeled_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| id.as_str() != anchor_id)
        .map(|(i, id)| (sq_dist(anchor, bank.unlabeled.row(i)), id.as_str(), i))
        .collect();
    if k > candidates.len() {
        return Err(Error::PoolSize { k, available: candidates.len() });
    }
    let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| by_distance_then_id(&(a.0, a.1), &(b.0, b.1));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_by(cmp);
    Ok(NeighborSet {
        anchor_id: anchor_id.to_string(),
        neighbor_ids: candidates.iter().map(|c| c.1.to_string()).collect(),
        distances: candidates.iter().map(|c| c.0.sqrt()).collect(),
        rows: candidates.iter().map(|c| c.2).collect(),
    })
}

/// Attention weights and local centres for `B` anchors with `K` neighbours
/// each. `neighbors` holds `B * K` rows, anchor `b`'s block first.
/// Returns `(alpha: B x K, centers: B x d)`.
pub fn attention_center_on_tape(
    bundle: &ModelBundle,
    tape: &mut Tape,
    p: &Bound,
    anchors: Var,
    neighbors: Var,
    k: usize,
) -> (Var, Var) {
    let b = tape.value(anchors).nrows();
    let repeat: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let rep = tape.gather(anchors, &repeat);
    let diff = tape.sub(rep, neighbors);
    let diff = tape.abs(diff);
    let scores = bundle.aggregate_on_tape(tape, p, diff);
    let scores = tape.reshape(scores, b, k);
    let alpha = tape.softmax(scores);
    let center = tape.weighted_rows(alpha, neighbors);
    (alpha, center)
}

/// `alpha_k = softmax_k(MLP(|anchor - neighbor_k|))`.
pub fn attention_weights(bundle: &ModelBundle, anchor: &TranslatedFeature, neighbors: &[TranslatedFeature]) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Contract("attention needs at least one neighbour".into()));
    }
    let d = anchor.0.len();
    let mut tape = Tape::new();
    let p = bundle.params.bind(&mut tape, &[]);
    let a = tape.constant(anchor.0.clone().insert_axis(ndarray::Axis(0)));
    let rows = Array2::from_shape_fn((neighbors.len(), d), |(i, j)| neighbors[i].0[j]);
    let n = tape.constant(rows);
    let (alpha, _) = attention_center_on_tape(bundle, &mut tape, &p, a, n, neighbors.len());
    Ok(tape.value(alpha).row(0).to_vec())
}

/// `c = sum_k alpha_k * neighbor_k`.
pub fn local_center(weights: &[f64], neighbors: &[TranslatedFeature]) -> Result<TranslatedFeature> {
    if weights.len() != neighbors.len() || neighbors.is_empty() {
        return Err(Error::Contract(format!("{} weights for {} neighbours", weights.len(), neighbors.len())));
    }
    let mut c = Array1::zeros(neighbors[0].0.len());
    for (w, n) in weights.iter().zip(neighbors) {
        c.scaled_add(*w, &n.0);
    }
    Ok(TranslatedFeature(c))
}

/// Neighbours whose nearest labeled sample carries the same label as the
/// anchor's nearest labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSet {
    pub anchor_id: String,
    pub positive_ids: Vec<String>,
    /// Rows in the bank's unlabeled matrix.
    pub rows: Vec<usize>,
}

pub fn select_positive(ns: &NeighborSet, bank: &FeatureBank) -> Result<PositiveSet> {
    if bank.labeled_ids.is_empty() {
        return Err(Error::Config("positive selection needs a non-empty labeled bank".into()));
    }
    let anchor = bank
        .feature(&ns.anchor_id)
        .ok_or_else(|| Error::Contract(format!("anchor {} is not in the feature bank", ns.anchor_id)))?;
    let anchor_label = bank.nearest_labeled_label(anchor);
    let mut positive_ids = Vec::new();
    let mut rows = Vec::new();
    for (id, &row) in ns.neighbor_ids.iter().zip(&ns.rows) {
        if bank.nearest_label[row] == anchor_label {
            positive_ids.push(id.clone());
            rows.push(row);
        }
    }
    Ok(PositiveSet { anchor_id: ns.anchor_id.clone(), positive_ids, rows })
}

/// Fraction of (anchor, neighbour) pairs that share a ground-truth label.
/// Pairs with an unknown label are skipped; no pairs gives 0.
pub fn neighbor_quality_ratio(sets: &[NeighborSet], truth: &EvalLabels) -> f64 {
    let mut agree = 0usize;
    let mut total = 0usize;
    for ns in sets {
        let Some(a) = truth.get(&ns.anchor_id) else { continue };
        for id in &ns.neighbor_ids {
            if let Some(n) = truth.get(id) {
                total += 1;
                agree += usize::from(n == a);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

/// Neighbour sets of every unlabeled sample, using its bank feature as anchor.
pub fn unlabeled_neighborhoods(bank: &FeatureBank, k: usize) -> Result<Vec<NeighborSet>> {
    bank.unlabeled_ids
        .iter()
        .enumerate()
        .map(|(i, id)| knn_query(bank, id, bank.unlabeled.row(i), k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use ndarray::array;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:03}")).collect()
    }

    fn padded(values: &[f64], d: usize) -> Mat {
        Array2::from_shape_fn((values.len(), d), |(i, j)| if j == 0 { values[i] } else { 0.0 })
    }

    #[test]
    fn hand_checkable_ordering() {
        let bank = FeatureBank::new(ids("u", 3), padded(&[0.0, 1.0, 10.0], 4), vec![], Array2::zeros((0, 4)), vec![], 0).unwrap();
        let ns = knn_query(&bank, "u000", bank.unlabeled.row(0), 2).unwrap();
        assert_eq!(ns.neighbor_ids, vec!["u001", "u002"]);
        assert_eq!(ns.distances, vec![1.0, 10.0]);
        assert!(matches!(knn_query(&bank, "u000", bank.unlabeled.row(0), 3), Err(Error::PoolSize { k: 3, available: 2 })));
    }

    #[test]
    fn labeled_anchor_can_take_the_whole_pool() {
        let bank = FeatureBank::new(ids("u", 3), padded(&[0.0, 1.0, 10.0], 2), ids("l", 1), padded(&[5.0], 2), vec![0], 0).unwrap();
        let ns = knn_query(&bank, "l000", bank.labeled.row(0), 3).unwrap();
        assert_eq!(ns.neighbor_ids, vec!["u001", "u000", "u002"]);
    }

    #[test]
    fn ties_break_by_id() {
        let bank = FeatureBank::new(
            vec!["b".into(), "a".into(), "c".into()],
            padded(&[1.0, -1.0, 1.0], 1),
            vec![],
            Array2::zeros((0, 1)),
            vec![],
            0,
        )
        .unwrap();
        let ns = knn_query(&bank, "x", array![0.0].view(), 3).unwrap();
        assert_eq!(ns.neighbor_ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let r = FeatureBank::new(ids("u", 1), padded(&[0.0], 1), ids("u", 1), padded(&[0.0], 1), vec![0], 0);
        assert!(r.is_err());
    }

    fn toy_bundle() -> ModelBundle {
        ModelBundle::new(ModelConfig::scaled(2, 3, 1), 3).unwrap()
    }

    #[test]
    fn single_neighbor_gets_all_weight() {
        let m = toy_bundle();
        let a = TranslatedFeature(array![0.3, -0.2]);
        let n = [TranslatedFeature(array![1.0, 2.0])];
        assert_eq!(attention_weights(&m, &a, &n).unwrap(), vec![1.0]);
        let c = local_center(&[1.0], &n).unwrap();
        assert_eq!(c, n[0]);
    }

    #[test]
    fn equal_absolute_differences_split_evenly() {
        let m = toy_bundle();
        let a = TranslatedFeature(array![0.0, 0.0]);
        let n = [TranslatedFeature(array![1.0, -2.0]), TranslatedFeature(array![-1.0, 2.0])];
        let w = attention_weights(&m, &a, &n).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_set_aggregator_matches_manual_softmax() {
        // d = 2; aggregator 2 -> 1 -> 1 -> 1 with hand-set weights.
        let mut m = ModelBundle::new(ModelConfig::scaled(1, 2, 1), 0).unwrap();
        let l = m.aggregator.layers.clone();
        assert_eq!(m.params.get(l[0].weight).dim(), (2, 1));
        *m.params.get_mut(l[0].weight) = array![[1.0], [2.0]];
        *m.params.get_mut(l[0].bias) = array![[0.5]];
        *m.params.get_mut(l[1].weight) = array![[3.0]];
        *m.params.get_mut(l[1].bias) = array![[-1.0]];
        *m.params.get_mut(l[2].weight) = array![[0.5]];
        *m.params.get_mut(l[2].bias) = array![[0.25]];
        let anchor = TranslatedFeature(array![0.0, 0.0]);
        let n = [
            TranslatedFeature(array![0.1, 0.2]),
            TranslatedFeature(array![-0.3, 0.0]),
            TranslatedFeature(array![0.05, -0.4]),
        ];
        let score = |x: f64, y: f64| {
            let h1 = (x + 2.0 * y + 0.5f64).max(0.0);
            let h2 = (3.0 * h1 - 1.0).max(0.0);
            0.5 * h2 + 0.25
        };
        let s: Vec<f64> = [(0.1, 0.2), (0.3, 0.0), (0.05, 0.4)].iter().map(|&(x, y)| score(x, y)).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
        let got = attention_weights(&m, &anchor, &n).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn center_of_identical_neighbors_is_that_neighbor() {
        let v = TranslatedFeature(array![1.5, -2.0, 0.25]);
        let c = local_center(&[0.2, 0.5, 0.3], &[v.clone(), v.clone(), v.clone()]).unwrap();
        for (a, b) in c.0.iter().zip(v.0.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_labeled_sample_makes_everything_positive() {
        let bank = FeatureBank::new(ids("u", 4), padded(&[0.0, 1.0, 2.0, 3.0], 2), ids("l", 1), padded(&[9.0], 2), vec![2], 0).unwrap();
        let ns = knn_query(&bank, "u000", bank.unlabeled.row(0), 3).unwrap();
        let pos = select_positive(&ns, &bank).unwrap();
        assert_eq!(pos.positive_ids, ns.neighbor_ids);
    }

    #[test]
    fn disagreeing_neighbors_are_not_positive() {
        // Anchor near label 0, all neighbours near label 1.
        let bank = FeatureBank::new(
            ids("u", 4),
            padded(&[0.0, 10.0, 11.0, 12.0], 1),
            ids("l", 2),
            padded(&[0.5, 10.5], 1),
            vec![0, 1],
            0,
        )
        .unwrap();
        let ns = knn_query(&bank, "u000", bank.unlabeled.row(0), 3).unwrap();
        assert!(select_positive(&ns, &bank).unwrap().positive_ids.is_empty());
    }

    #[test]
    fn empty_labeled_bank_is_a_config_error() {
        let bank = FeatureBank::new(ids("u", 3), padded(&[0.0, 1.0, 2.0], 1), vec![], Array2::zeros((0, 1)), vec![], 0).unwrap();
        let ns = knn_query(&bank, "u000", bank.unlabeled.row(0), 2).unwrap();
        assert!(matches!(select_positive(&ns, &bank), Err(Error::Config(_))));
    }

    #[test]
    fn quality_ratio_counts_agreeing_pairs() {
        let set = |a: &str, n: &[&str]| NeighborSet {
            anchor_id: a.into(),
            neighbor_ids: n.iter().map(|s| s.to_string()).collect(),
            distances: vec![0.0; n.len()],
            rows: vec![0; n.len()],
        };
        let truth = EvalLabels::from_pairs(
            [("a", 0), ("b", 0), ("c", 1), ("d", 0), ("e", 1), ("f", 1)].map(|(k, v)| (k.to_string(), v)),
        );
        let sets = vec![set("a", &["b", "d", "c"]), set("c", &["e", "a", "b"]), set("f", &["c", "e", "c"])];
        assert!((neighbor_quality_ratio(&sets, &truth) - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(neighbor_quality_ratio(&[set("a", &["b", "d"])], &truth), 1.0);
        assert_eq!(neighbor_quality_ratio(&[set("a", &["c", "e"])], &truth), 0.0);
    }
}
