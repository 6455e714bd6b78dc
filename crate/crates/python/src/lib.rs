//! Python bindings for `dmapl`.
//!
//! Configs and records cross the boundary as plain dicts (via JSON), numeric
//! data as nested lists of floats.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dmapl::datasets::{self, DomainShiftSpec};
use dmapl::numkit::Matrix;
use dmapl::pipeline::{self, RunSummary, SweepGrid};
use dmapl::pseudolabel::{self, class_feature_means};
use dmapl::trainer::{self, Mode};

pyo3::create_exception!(dmapl_py, DmaplError, PyValueError, "Error raised by the dmapl core.");

fn err(e: dmapl::Error) -> PyErr {
    match e {
        dmapl::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => DmaplError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| DmaplError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    dmapl::numkit::softmax(&logits).map_err(err)
}

#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    dmapl::numkit::l2_normalize(&v).map_err(err)
}

#[pyfunction]
fn cosine_lr(t: usize, total_steps: usize, eta_0: f64, eta_1: f64) -> f64 {
    dmapl::model::cosine_lr(t, total_steps, eta_0, eta_1)
}

#[pyclass(module = "dmapl_py")]
struct Dataset {
    inner: datasets::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (features, num_classes, labels=None, domain_tag="data"))]
    fn new(features: Vec<Vec<f64>>, num_classes: usize, labels: Option<Vec<usize>>, domain_tag: &str) -> PyResult<Self> {
        let inner = datasets::Dataset::new(matrix(features)?, labels, num_classes, domain_tag).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: datasets::load_csv(path).map_err(err)?,
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        datasets::save_csv(&self.inner, path).map_err(err)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        nested(self.inner.features())
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn domain_tag(&self) -> &str {
        self.inner.domain_tag()
    }

    fn without_labels(&self) -> Self {
        Self {
            inner: self.inner.without_labels(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, num_classes={}, labeled={}, tag='{}')",
            self.inner.len(),
            self.inner.dim(),
            self.inner.num_classes(),
            self.inner.labels().is_some(),
            self.inner.domain_tag()
        )
    }
}

fn wrap(d: &datasets::Dataset) -> Dataset {
    Dataset { inner: d.clone() }
}

/// Generates the shifted benchmark and returns its splits as a dict.
/// Keyword arguments override benchmark fields (seed, rotation, ...).
#[pyfunction]
#[pyo3(signature = (split_ratio=0.8, val_fraction=0.1, **spec))]
fn prepare_benchmark<'py>(
    py: Python<'py>,
    split_ratio: f64,
    val_fraction: f64,
    spec: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec: DomainShiftSpec = match spec {
        Some(d) => from_py(d.as_any())?,
        None => DomainShiftSpec::default(),
    };
    let data = pipeline::prepare_benchmark(&spec, split_ratio, val_fraction).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("source_train", wrap(&data.source_train))?;
    out.set_item("source_val", wrap(&data.source_val))?;
    out.set_item("source_test", wrap(&data.source_test))?;
    out.set_item("target_train", wrap(&data.target_train))?;
    out.set_item("target_train_truth", data.target_train_truth)?;
    out.set_item("target_test", wrap(&data.target_test))?;
    Ok(out)
}

/// Training configuration. Keyword arguments override defaults.
#[pyclass(module = "dmapl_py")]
struct TrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner: trainer::TrainConfig = match overrides {
            Some(d) => from_py(d.as_any())?,
            None => trainer::TrainConfig::default(),
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::TrainConfig::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Sets one field from its textual value, as `--set key=value` does.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({:?})", self.inner)
    }
}

#[pyclass(module = "dmapl_py")]
struct Model {
    inner: dmapl::model::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dmapl::model::Model::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Returns a dict with `features`, `logits` and `probs` row lists.
    fn forward<'py>(&self, py: Python<'py>, batch: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.forward(&matrix(batch)?).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("features", nested(&out.features))?;
        d.set_item("logits", nested(&out.logits))?;
        d.set_item("probs", nested(&out.probs))?;
        Ok(d)
    }

    fn predict(&self, data: &Dataset) -> PyResult<Vec<usize>> {
        dmapl::eval::predict(&self.inner, &data.inner).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __repr__(&self) -> String {
        let a = self.inner.arch();
        format!(
            "Model(input_dim={}, hidden_dims={:?}, bottleneck_dim={}, num_classes={})",
            a.input_dim, a.hidden_dims, a.bottleneck_dim, a.num_classes
        )
    }
}

#[pyfunction]
fn train_source(py: Python<'_>, source_train: &Dataset, source_val: &Dataset, config: &TrainConfig) -> PyResult<Model> {
    let inner = py
        .detach(|| trainer::train_source(&source_train.inner, &source_val.inner, &config.inner))
        .map_err(err)?;
    Ok(Model { inner })
}

/// Adapts `model` to `target_train`. Returns a dict with the adapted
/// `model`, the run `summary`, per-epoch records and, when available, the
/// split.
#[pyfunction]
#[pyo3(signature = (model, target_train, config, target_truth=None, target_test=None))]
fn adapt<'py>(
    py: Python<'py>,
    model: &Model,
    target_train: &Dataset,
    config: &TrainConfig,
    target_truth: Option<Vec<usize>>,
    target_test: Option<&Dataset>,
) -> PyResult<Bound<'py, PyDict>> {
    let test = target_test.map(|t| t.inner.clone());
    let (outcome, _) = py
        .detach(|| {
            pipeline::run_adaptation(
                &model.inner,
                &target_train.inner.without_labels(),
                target_truth.as_deref(),
                test.as_ref(),
                &config.inner,
            )
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("summary", to_py(py, &RunSummary::from(&outcome.record))?)?;
    d.set_item("epochs", to_py(py, &outcome.record.epochs)?)?;
    d.set_item("split", outcome.split.as_ref().map(|s| to_py(py, s)).transpose()?)?;
    d.set_item("model", Model { inner: outcome.model })?;
    Ok(d)
}

#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, test: &Dataset) -> PyResult<Bound<'py, PyAny>> {
    let metrics = dmapl::eval::evaluate(&model.inner, &test.inner).map_err(err)?;
    to_py(py, &metrics)
}

/// Runs a sweep described by a TOML grid; returns one dict per run.
#[pyfunction]
#[pyo3(signature = (grid_toml, jobs=1))]
fn sweep<'py>(py: Python<'py>, grid_toml: &str, jobs: usize) -> PyResult<Bound<'py, PyList>> {
    let grid = SweepGrid::from_toml_str(grid_toml).map_err(err)?;
    let benchmark = grid.benchmark.clone().unwrap_or_default();
    let rows = py.detach(|| pipeline::sweep(&grid, &benchmark, jobs)).map_err(err)?;
    let out = PyList::empty(py);
    for r in &rows {
        let d = PyDict::new(py);
        let params = PyDict::new(py);
        for (k, v) in &r.params {
            params.set_item(k, v)?;
        }
        d.set_item("params", params)?;
        d.set_item("seed", r.seed)?;
        d.set_item("ratio", r.ratio)?;
        d.set_item("pl_accuracy", r.pl_accuracy)?;
        d.set_item("test_accuracy", r.test_accuracy)?;
        d.set_item("error", r.error.clone())?;
        out.append(d)?;
    }
    Ok(out)
}

#[pyfunction]
fn modes() -> Vec<&'static str> {
    Mode::ALL.iter().map(|m| m.name()).collect()
}

#[pyclass(module = "dmapl_py")]
struct CentroidBank {
    inner: pseudolabel::CentroidBank,
}

#[pymethods]
impl CentroidBank {
    #[new]
    fn new(num_classes: usize, dim: usize, alpha: f64) -> PyResult<Self> {
        Ok(Self {
            inner: pseudolabel::CentroidBank::new(num_classes, dim, alpha).map_err(err)?,
        })
    }

    /// Blends in the per-class means of unit-norm rows `z` labeled `labels`.
    fn update(&mut self, z: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<()> {
        let c = self.inner.centroids().rows();
        let means = class_feature_means(&matrix(z)?, &labels, c, None).map_err(err)?;
        self.inner.update(&means).map_err(err)
    }

    fn assign(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.assign(&matrix(z)?).map_err(err)
    }

    #[getter]
    fn centroids(&self) -> Vec<Vec<f64>> {
        nested(self.inner.centroids())
    }

    #[getter]
    fn is_warm(&self) -> bool {
        self.inner.is_warm()
    }
}

#[pyclass(module = "dmapl_py")]
struct SoftLabelStore {
    inner: pseudolabel::SoftLabelStore,
}

#[pymethods]
impl SoftLabelStore {
    #[new]
    fn new(num_instances: usize, num_classes: usize, beta: f64) -> PyResult<Self> {
        Ok(Self {
            inner: pseudolabel::SoftLabelStore::new(num_instances, num_classes, beta).map_err(err)?,
        })
    }

    /// Moves each listed instance toward the one-hot vector of its class.
    fn update(&mut self, indices: Vec<usize>, classes: Vec<usize>) -> PyResult<()> {
        if indices.len() != classes.len() {
            return Err(DmaplError::new_err("indices and classes differ in length"));
        }
        let c = self.inner.soft_labels().cols();
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(DmaplError::new_err(format!("class {bad} out of range for {c} classes")));
        }
        let y = pseudolabel::one_hot(&classes, c);
        self.inner.update(&indices, &y).map_err(err)
    }

    fn get(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .gather(&[i])
            .map(|m| m.row(0).to_vec())
            .map_err(err)
    }

    fn update_count(&self, i: usize) -> PyResult<u64> {
        self.inner
            .update_counts()
            .get(i)
            .copied()
            .ok_or_else(|| err(dmapl::Error::IndexOutOfRange { index: i, len: self.inner.len() }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pymodule]
fn dmapl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DmaplError", m.py().get_type::<DmaplError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Model>()?;
    m.add_class::<CentroidBank>()?;
    m.add_class::<SoftLabelStore>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(train_source, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(modes, m)?)?;
    Ok(())
}
