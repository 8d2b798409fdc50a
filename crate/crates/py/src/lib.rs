//! Python bindings: synthetic data, training, checkpoints, prediction and the
//! neighbourhood and loss primitives.

use std::path::PathBuf;

use assl::baselines::Strategy;
use assl::data::{self, DatasetSplit, SkeletonSequence, SyntheticConfig};
use assl::models::{ClassDistribution, ModelBundle};
use assl::neighborhood::{self, FeatureBank};
use assl::trainer::{self, RunOptions, TrainConfig};
use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: assl::Error) -> PyErr {
    match e {
        assl::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_config(config: Option<&str>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// One skeleton sequence: `frames[t][j] = [x, y, z]`.
#[pyclass(name = "Sequence", module = "pyassl", from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: SkeletonSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (id, frames, label=None))]
    fn new(id: String, frames: Vec<Vec<Vec<f64>>>, label: Option<usize>) -> PyResult<Self> {
        let t = frames.len();
        let j = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != j || f.iter().any(|p| p.len() != 3)) {
            return Err(PyValueError::new_err("frames must have shape (T, J, 3)"));
        }
        let flat: Vec<f64> = frames.into_iter().flatten().flatten().collect();
        let arr = Array3::from_shape_vec((t, j, 3), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: SkeletonSequence::new(id, arr, label).map_err(py_err)? })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn label(&self) -> Option<usize> {
        self.inner.label
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    #[getter]
    fn num_joints(&self) -> usize {
        self.inner.num_joints()
    }

    #[getter]
    fn frames(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .frames
            .outer_iter()
            .map(|f| f.outer_iter().map(|p| p.to_vec()).collect())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Sequence(id={:?}, frames={}, joints={}, label={:?})", self.inner.id, self.num_frames(), self.num_joints(), self.inner.label)
    }
}

fn unwrap_seqs(seqs: Vec<PySequence>) -> Vec<SkeletonSequence> {
    seqs.into_iter().map(|s| s.inner).collect()
}

fn wrap_seqs(seqs: Vec<SkeletonSequence>) -> Vec<PySequence> {
    seqs.into_iter().map(|inner| PySequence { inner }).collect()
}

#[pyfunction]
#[pyo3(signature = (classes=6, joints=8, frames=60, samples_per_class=100, noise_scale=0.25, max_rotation_degrees=45.0, seed=0))]
fn generate_synthetic(
    classes: usize,
    joints: usize,
    frames: usize,
    samples_per_class: usize,
    noise_scale: f64,
    max_rotation_degrees: f64,
    seed: u64,
) -> PyResult<Vec<PySequence>> {
    let cfg = SyntheticConfig { classes, joints, frames, samples_per_class, noise_scale, max_rotation_degrees, seed };
    Ok(wrap_seqs(data::generate_synthetic(&cfg).map_err(py_err)?))
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PySequence>> {
    Ok(wrap_seqs(data::load_dataset(&path).map_err(py_err)?))
}

#[pyfunction]
fn write_dataset(path: PathBuf, sequences: Vec<PySequence>) -> PyResult<()> {
    data::write_dataset(&path, &unwrap_seqs(sequences)).map_err(py_err)
}

/// A trained (or freshly initialised) model with the frame count it expects.
#[pyclass(name = "Model", module = "pyassl")]
struct PyModel {
    bundle: ModelBundle,
    frames: usize,
}

#[pymethods]
impl PyModel {
    /// A randomly initialised model.
    #[new]
    #[pyo3(signature = (joints, classes, hidden=32, frames=20, seed=0))]
    fn new(joints: usize, classes: usize, hidden: usize, frames: usize, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig { hidden, frames, ..TrainConfig::default() };
        let bundle = ModelBundle::new(cfg.model_config(joints, classes), seed).map_err(py_err)?;
        Ok(Self { bundle, frames })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (bundle, frames) = assl::checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { bundle, frames })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        assl::checkpoint::save(&self.bundle, self.frames, &path).map_err(py_err)
    }

    #[getter]
    fn frames(&self) -> usize {
        self.frames
    }

    #[getter]
    fn feature_width(&self) -> usize {
        self.bundle.feature_width()
    }

    /// Class probabilities per sequence.
    #[pyo3(signature = (sequences, seed=0))]
    fn predict(&self, sequences: Vec<PySequence>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let inputs = self.inputs(&sequences, seed);
        let preds = self.bundle.predict(&inputs).map_err(py_err)?;
        Ok(preds.into_iter().map(|p| p.0.to_vec()).collect())
    }

    /// Translated features, one row per sequence.
    #[pyo3(signature = (sequences, seed=0))]
    fn embed(&self, sequences: Vec<PySequence>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let inputs = self.inputs(&sequences, seed);
        let m = self.bundle.translated_features(&inputs).map_err(py_err)?;
        Ok(m.outer_iter().map(|r| r.to_vec()).collect())
    }

    /// Test accuracy on labeled sequences.
    #[pyo3(signature = (sequences, seed=0))]
    fn evaluate(&self, sequences: Vec<PySequence>, seed: u64) -> PyResult<f64> {
        trainer::evaluate(&self.bundle, &unwrap_seqs(sequences), self.frames, trainer::eval_seed(seed)).map_err(py_err)
    }
}

impl PyModel {
    fn inputs(&self, sequences: &[PySequence], seed: u64) -> Vec<Array3<f64>> {
        sequences
            .iter()
            .map(|s| data::model_input(&s.inner, self.frames, neighborhood::sample_seed(trainer::eval_seed(seed), &s.inner.id)))
            .collect()
    }
}

fn split_for(train: Vec<PySequence>, test: Vec<PySequence>, fraction: f64, seed: u64) -> PyResult<DatasetSplit> {
    data::make_split(&unwrap_seqs(train), fraction, seed)
        .and_then(|s| s.with_test(unwrap_seqs(test)))
        .map_err(py_err)
}

/// Trains one model. `config` is a JSON object with training keys
/// (strategy, lambda1, k, epochs, hidden, ...). Returns the best model and
/// the per-epoch metrics as dicts.
#[pyfunction]
#[pyo3(signature = (train, test, labels_fraction=0.1, config=None, out_dir=None))]
fn train(
    py: Python<'_>,
    train: Vec<PySequence>,
    test: Vec<PySequence>,
    labels_fraction: f64,
    config: Option<&str>,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyModel, f64, Vec<Py<PyAny>>)> {
    let cfg = parse_config(config)?;
    let split = split_for(train, test, labels_fraction, cfg.seed)?;
    let opts = RunOptions { out_dir, ..RunOptions::default() };
    let result = py.detach(|| trainer::run_experiment_with(&cfg, &split, &opts)).map_err(py_err)?;
    let json = py.import("json")?;
    let rows = result
        .rows
        .iter()
        .map(|r| {
            let text = serde_json::to_string(r).map_err(|e| PyValueError::new_err(e.to_string()))?;
            Ok(json.call_method1("loads", (text,))?.unbind())
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { bundle: result.best_bundle, frames: cfg.frames }, result.best_accuracy, rows))
}

/// Learning rate at `epoch` under `config` (defaults when omitted).
#[pyfunction]
#[pyo3(signature = (epoch, config=None))]
fn learning_rate(epoch: usize, config: Option<&str>) -> PyResult<f64> {
    Ok(trainer::learning_rate(&parse_config(config)?, epoch))
}

#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::valid_names()
}

/// Exact KNN over `unlabeled` rows for one anchor. Returns
/// `(neighbor_ids, distances)` ordered by distance, ties by id.
#[pyfunction]
fn knn_query(
    unlabeled_ids: Vec<String>,
    unlabeled: Vec<Vec<f64>>,
    anchor_id: &str,
    anchor: Vec<f64>,
    k: usize,
) -> PyResult<(Vec<String>, Vec<f64>)> {
    let width = anchor.len();
    let bank = FeatureBank::new(unlabeled_ids, matrix(unlabeled)?, Vec::new(), Array2::zeros((0, width)), Vec::new(), 0)
        .map_err(py_err)?;
    let ns = neighborhood::knn_query(&bank, anchor_id, Array1::from(anchor).view(), k).map_err(py_err)?;
    Ok((ns.neighbor_ids, ns.distances))
}

/// KL(p || q) between two class distributions.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("distributions differ in length"));
    }
    Ok(assl::losses::kl_divergence(&ClassDistribution(Array1::from(p)), &ClassDistribution(Array1::from(q))))
}

/// Discriminator objective over labeled and unlabeled scores in (0, 1).
#[pyfunction]
fn adversarial_loss(labeled_scores: Vec<f64>, unlabeled_scores: Vec<f64>) -> f64 {
    assl::losses::adversarial_loss(&labeled_scores, &unlabeled_scores)
}

/// Mean cross-entropy of predictions against labels.
#[pyfunction]
fn cross_entropy(preds: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let preds: Vec<ClassDistribution> = preds.into_iter().map(|p| ClassDistribution(Array1::from(p))).collect();
    assl::losses::supervised_loss(&preds, &labels).map_err(py_err)
}

#[pymodule]
fn pyassl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(knn_query, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(adversarial_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    Ok(())
}
