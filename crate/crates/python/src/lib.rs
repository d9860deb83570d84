//! Python bindings over `idea-core`. Matrices cross the boundary as lists of
//! rows; reports and manifests as JSON strings.

use std::path::PathBuf;

use idea_core::harness::{self, ExperimentConfig};
use idea_core::hypersearch::{self, GridSpec};
use idea_core::synthetic::{SyntheticBenchmark, SyntheticSpec};
use idea_core::tidea::{self, Components, LabeledSplit, TrainConfig, TrainableState};
use idea_core::{embedstore, CacheManifest, EmbeddingMatrix, FewShotCache, ZeroShotHead};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(idea_py, IdeaError, PyException);

type GridTable = Vec<(f64, f64, f64, f64)>;
type History = Vec<(usize, f64, f64)>;

fn py_err(e: idea_core::IdeaError) -> PyErr {
    IdeaError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    IdeaError::new_err(format!("[config] {e}"))
}

#[pyclass(name = "Matrix", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMatrix(EmbeddingMatrix);

#[pymethods]
impl PyMatrix {
    #[new]
    #[pyo3(signature = (rows, normalized = false))]
    fn new(rows: Vec<Vec<f32>>, normalized: bool) -> PyResult<Self> {
        EmbeddingMatrix::from_rows(&rows, normalized)
            .map(PyMatrix)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        embedstore::load_embeddings(path).map(PyMatrix).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        embedstore::save_embeddings(&self.0, path).map_err(py_err)
    }

    /// A row-normalized copy.
    fn normalize(&self) -> PyResult<Self> {
        embedstore::l2_normalize_rows(&self.0).map(PyMatrix).map_err(py_err)
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.0.to_rows()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.0.is_normalized()
    }

    fn __len__(&self) -> usize {
        self.0.rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Matrix(rows={}, dim={}, normalized={})",
            self.0.rows(),
            self.0.dim(),
            self.0.is_normalized()
        )
    }
}

#[pyclass(name = "FusionConfig", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyFusion(idea_core::FusionConfig);

#[pymethods]
impl PyFusion {
    #[new]
    #[pyo3(signature = (alpha = 0.5, beta = 2.75, theta = 2.0))]
    fn new(alpha: f64, beta: f64, theta: f64) -> PyResult<Self> {
        idea_core::FusionConfig::new(alpha, beta, theta)
            .map(PyFusion)
            .map_err(py_err)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    fn __repr__(&self) -> String {
        format!(
            "FusionConfig(alpha={}, beta={}, theta={})",
            self.0.alpha, self.0.beta, self.0.theta
        )
    }
}

#[pyclass(name = "ZeroShotHead", frozen)]
struct PyHead(ZeroShotHead);

#[pymethods]
impl PyHead {
    #[new]
    fn new(prototypes: &PyMatrix, class_names: Vec<String>) -> PyResult<Self> {
        ZeroShotHead::new(prototypes.0.clone(), class_names)
            .map(PyHead)
            .map_err(py_err)
    }

    fn logits(&self, x: Vec<f32>) -> PyResult<Vec<f32>> {
        idea_core::zeroshot_logits(&self.0, &x).map_err(py_err)
    }
}

#[pyclass(name = "FewShotCache", frozen)]
struct PyCache(FewShotCache);

#[pymethods]
impl PyCache {
    /// `manifest` is the manifest JSON text.
    #[new]
    fn new(images: &PyMatrix, texts: &PyMatrix, manifest: &str, labels: Vec<usize>) -> PyResult<Self> {
        let manifest: CacheManifest = serde_json::from_str(manifest).map_err(json_err)?;
        idea_core::assemble_cache(&images.0, &texts.0, &manifest, &labels)
            .map(PyCache)
            .map_err(py_err)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn shots(&self) -> usize {
        self.0.shots()
    }

    fn images(&self) -> PyMatrix {
        PyMatrix(self.0.images().clone())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "TrainableState", frozen)]
struct PyState(TrainableState);

#[pymethods]
impl PyState {
    #[getter]
    fn w_proj(&self) -> Vec<f64> {
        self.0.w_proj().to_vec()
    }

    #[getter]
    fn e_bias(&self) -> Vec<f64> {
        self.0.e_bias().to_vec()
    }
}

#[pyfunction]
fn idea_logits(cache: &PyCache, head: &PyHead, x: Vec<f32>, config: &PyFusion) -> PyResult<Vec<f32>> {
    idea_core::idea_logits(&cache.0, &head.0, &x, &config.0).map_err(py_err)
}

#[pyfunction]
fn idea_logits_batch(
    cache: &PyCache,
    head: &PyHead,
    xs: &PyMatrix,
    config: &PyFusion,
) -> PyResult<Vec<Vec<f32>>> {
    idea_core::idea_logits_batch(&cache.0, &head.0, &xs.0, &config.0).map_err(py_err)
}

#[pyfunction]
fn tidea_logits(
    cache: &PyCache,
    head: &PyHead,
    state: &PyState,
    x: Vec<f32>,
    config: &PyFusion,
) -> PyResult<Vec<f32>> {
    idea_core::tidea_logits(&cache.0, &head.0, &state.0, &x, &config.0).map_err(py_err)
}

#[pyfunction]
fn classify(logits: Vec<f32>) -> PyResult<usize> {
    idea_core::classify(&logits).map_err(py_err)
}

/// Top-1 accuracy of `logits` against `labels`.
#[pyfunction]
fn evaluate(logits: Vec<Vec<f32>>, labels: Vec<usize>) -> PyResult<f64> {
    idea_core::evaluate(&logits, &labels)
        .map(|s| s.top1_accuracy)
        .map_err(py_err)
}

#[pyfunction]
fn sample_shots(labels: Vec<usize>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    idea_core::sample_shots(&labels, k, seed).map_err(py_err)
}

/// Returns `(best_config, best_accuracy, table)` with table rows
/// `(alpha, beta, theta, accuracy)`. `grid` is a JSON object with `alphas`,
/// `betas`, `thetas`; `None` uses the default grid.
#[pyfunction]
#[pyo3(signature = (cache, head, val_features, val_labels, grid = None))]
fn grid_search(
    cache: &PyCache,
    head: &PyHead,
    val_features: &PyMatrix,
    val_labels: Vec<usize>,
    grid: Option<&str>,
) -> PyResult<(PyFusion, f64, GridTable)> {
    let grid = match grid {
        Some(text) => serde_json::from_str::<GridSpec>(text).map_err(json_err)?,
        None => GridSpec::default(),
    };
    let out = hypersearch::grid_search(&cache.0, &head.0, &val_features.0, &val_labels, &grid, None)
        .map_err(py_err)?;
    let table = out
        .table
        .iter()
        .map(|r| (r.alpha, r.beta, r.theta, r.accuracy))
        .collect();
    Ok((PyFusion(out.best), out.best_accuracy, table))
}

/// Trains from zeros on the cache itself; returns `(state, history)` with
/// history rows `(epoch, train_loss, val_accuracy)`.
#[pyfunction]
#[pyo3(signature = (
    cache, head, val_features, val_labels, config,
    proj = true, bias = true, learning_rate = 5e-4, epochs = 50, batch_size = 256, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    cache: &PyCache,
    head: &PyHead,
    val_features: &PyMatrix,
    val_labels: Vec<usize>,
    config: &PyFusion,
    proj: bool,
    bias: bool,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<(PyState, History)> {
    let tc = TrainConfig {
        learning_rate,
        epochs,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let out = (|| {
        tidea::train(
            &cache.0,
            &head.0,
            LabeledSplit::new(cache.0.images(), cache.0.labels())?,
            LabeledSplit::new(&val_features.0, &val_labels)?,
            &config.0,
            Components { proj, bias },
            &tc,
        )
    })()
    .map_err(py_err)?;
    let history = out
        .history
        .iter()
        .map(|r| (r.epoch, r.train_loss, r.val_accuracy))
        .collect();
    Ok((PyState(out.state), history))
}

/// Runs an experiment described by JSON text and returns the report JSON.
/// Relative dataset paths resolve against the working directory.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    harness::run_experiment(&config)
        .and_then(|r| r.to_canonical_json())
        .map_err(py_err)
}

/// Like [`run_experiment`] but reads the config file, resolving paths
/// against its directory.
#[pyfunction]
fn run_experiment_file(path: PathBuf) -> PyResult<String> {
    let config = ExperimentConfig::load(path).map_err(py_err)?;
    harness::run_experiment(&config)
        .and_then(|r| r.to_canonical_json())
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, seed = 0, classes = 10, dim = 32, noise = 0.2))]
fn write_synthetic(out: PathBuf, seed: u64, classes: usize, dim: usize, noise: f64) -> PyResult<()> {
    let spec = SyntheticSpec {
        num_classes: classes,
        dim,
        image_noise: noise,
        seed,
        ..SyntheticSpec::default()
    };
    SyntheticBenchmark::generate(&spec)
        .and_then(|b| b.write_dataset(out))
        .map_err(py_err)
}

#[pymodule]
fn idea_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IdeaError", m.py().get_type::<IdeaError>())?;
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyFusion>()?;
    m.add_class::<PyHead>()?;
    m.add_class::<PyCache>()?;
    m.add_class::<PyState>()?;
    m.add_function(wrap_pyfunction!(idea_logits, m)?)?;
    m.add_function(wrap_pyfunction!(idea_logits_batch, m)?)?;
    m.add_function(wrap_pyfunction!(tidea_logits, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_shots, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_file, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    Ok(())
}
