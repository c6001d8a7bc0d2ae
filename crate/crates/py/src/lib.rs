//! Python bindings for `ucds`: synthetic data, splits, constrained
//! dominant-set clustering, fairness-regularized training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use ucds::artifacts::{load_checkpoint, load_cluster_cache, save_checkpoint, save_cluster_cache, Checkpoint};
use ucds::cds::{brute_force_constrained_cluster, is_dominant_set, solve_constrained_cluster};
use ucds::data::{load_interactions, InteractionDataset};
use ucds::fairness::ClusterMap;
use ucds::graph::{compute_alpha, AffinityMatrix};
use ucds::linalg::SquareMatrix;
use ucds::pipeline::{self, Prepared, Settings};
use ucds::recsys::{predict_score, ModelParams};

fn to_py(e: ucds::Error) -> PyErr {
    match e {
        ucds::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<SquareMatrix> {
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(PyValueError::new_err("weights must be a square list of lists"));
    }
    Ok(SquareMatrix::from_rows(&rows))
}

/// Pipeline settings. Keyword arguments are applied as `key=value` pairs;
/// `Settings.keys()` lists them.
#[pyclass(name = "Settings", from_py_object)]
#[derive(Clone)]
struct PySettings {
    inner: Settings,
}

#[pymethods]
impl PySettings {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut s = Self {
            inner: Settings::default(),
        };
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                s.set(&k.extract::<String>()?, &v)?;
            }
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = if value.is_instance_of::<PyBool>() {
            value.extract::<bool>()?.to_string()
        } else {
            value.str()?.to_string()
        };
        self.inner.set(key, &text).map_err(to_py)
    }

    #[staticmethod]
    fn keys() -> Vec<(&'static str, &'static str)> {
        Settings::KEYS.to_vec()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.train.beta
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Dataset", skip_from_py_object)]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    /// Planted-archetype dataset built from the synthetic keys of `settings`.
    #[staticmethod]
    #[pyo3(signature = (settings = None))]
    fn synthetic(settings: Option<&PySettings>) -> PyResult<Self> {
        let s = settings.map(|s| s.inner.clone()).unwrap_or_default();
        let inner = pipeline::synthetic_dataset(&s).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, format = "tsv"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let format = format.parse().map_err(to_py)?;
        let inner = load_interactions(path, format).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Builds a dataset from `(user_id, item_id)` string pairs.
    #[staticmethod]
    fn from_pairs(pairs: Vec<(String, String)>) -> PyResult<Self> {
        let mut users: Vec<String> = Vec::new();
        let mut items: Vec<String> = Vec::new();
        let mut user_index = std::collections::HashMap::new();
        let mut item_index = std::collections::HashMap::new();
        let mut dense = Vec::with_capacity(pairs.len());
        for (u, i) in pairs {
            let ui = *user_index.entry(u.clone()).or_insert_with(|| {
                users.push(u);
                users.len() - 1
            });
            let ii = *item_index.entry(i.clone()).or_insert_with(|| {
                items.push(i);
                items.len() - 1
            });
            dense.push((ui, ii));
        }
        let inner = InteractionDataset::from_pairs(users, items, dense).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn n_interactions(&self) -> usize {
        self.inner.n_interactions()
    }

    #[getter]
    fn user_ids(&self) -> Vec<String> {
        self.inner.user_ids().to_vec()
    }

    fn user_items(&self, user: usize) -> PyResult<Vec<usize>> {
        if user >= self.inner.n_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.inner.user_items(user).to_vec())
    }

    fn save_tsv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        self.inner
            .write_tsv(std::io::BufWriter::new(file))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.n_interactions()
    }
}

/// Dataset with its activity partition and leave-one-out split.
#[pyclass(name = "Prepared", skip_from_py_object)]
struct PyPrepared {
    inner: Prepared,
}

#[pymethods]
impl PyPrepared {
    #[new]
    #[pyo3(signature = (dataset, settings = None))]
    fn new(dataset: &PyDataset, settings: Option<&PySettings>) -> PyResult<Self> {
        let s = settings.map(|s| s.inner.clone()).unwrap_or_default();
        let inner = pipeline::prepare(dataset.inner.clone(), &s).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn advantaged(&self) -> Vec<usize> {
        self.inner.partition.advantaged.clone()
    }

    #[getter]
    fn disadvantaged(&self) -> Vec<usize> {
        self.inner.partition.disadvantaged.clone()
    }

    #[getter]
    fn excluded_users(&self) -> Vec<usize> {
        self.inner.split.excluded_users.clone()
    }

    fn train_items(&self, user: usize) -> PyResult<Vec<usize>> {
        self.inner
            .split
            .train
            .get(user)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("user {user} out of range")))
    }

    /// `(positive, negatives)` held out for `user` in the test split, or
    /// `None` for excluded users.
    fn test_record(&self, user: usize) -> PyResult<Option<(usize, Vec<usize>)>> {
        let record = self
            .inner
            .split
            .test
            .get(user)
            .ok_or_else(|| PyValueError::new_err(format!("user {user} out of range")))?;
        Ok(record.as_ref().map(|h| (h.positive, h.negatives.clone())))
    }
}

#[pyclass(name = "Clusters", skip_from_py_object)]
struct PyClusters {
    inner: ClusterMap,
}

#[pymethods]
impl PyClusters {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn source(&self) -> String {
        self.inner.source.to_string()
    }

    /// `(member, importance)` pairs for one disadvantaged user, heaviest first.
    fn members(&self, target: usize) -> PyResult<Vec<(usize, f64)>> {
        let c = self
            .inner
            .entries
            .get(&target)
            .ok_or_else(|| PyValueError::new_err(format!("user {target} has no cluster")))?;
        Ok(c.members.iter().map(|m| (m.user, m.importance)).collect())
    }

    fn targets(&self) -> Vec<usize> {
        self.inner.entries.keys().copied().collect()
    }

    fn n_nonempty(&self) -> usize {
        self.inner.n_nonempty()
    }

    fn save(&self, path: PathBuf, prepared: &PyPrepared) -> PyResult<()> {
        save_cluster_cache(path, &self.inner, &prepared.inner.dataset).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf, prepared: &PyPrepared) -> PyResult<Self> {
        let inner = load_cluster_cache(path, &prepared.inner.dataset).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel {
    checkpoint: Checkpoint,
}

impl PyModel {
    fn params(&self) -> &ModelParams {
        &self.checkpoint.params
    }
}

#[pymethods]
impl PyModel {
    fn score(&self, user: usize, item: usize) -> PyResult<f64> {
        predict_score(self.params(), user, item).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.params().dim()
    }

    fn user_embedding(&self, user: usize) -> PyResult<Vec<f64>> {
        if user >= self.params().n_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.params().user_embeddings.row(user).to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(path, &self.checkpoint).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = load_checkpoint(path).map_err(to_py)?;
        Ok(Self { checkpoint })
    }
}

/// Clusters every disadvantaged user with the method named by the
/// `method` setting (`ucds` or `naive`).
#[pyfunction]
#[pyo3(signature = (prepared, settings = None))]
fn cluster(py: Python<'_>, prepared: &PyPrepared, settings: Option<&PySettings>) -> PyResult<PyClusters> {
    let s = settings.map(|s| s.inner.clone()).unwrap_or_default();
    let inner = py
        .detach(|| pipeline::build_clusters(&prepared.inner, &s))
        .map_err(to_py)?;
    Ok(PyClusters { inner })
}

/// Trains the model and returns it with one
/// `(epoch, utility_loss, fairness_loss, combined_loss)` row per epoch.
#[pyfunction]
#[pyo3(signature = (prepared, clusters = None, settings = None))]
fn train(
    py: Python<'_>,
    prepared: &PyPrepared,
    clusters: Option<&PyClusters>,
    settings: Option<&PySettings>,
) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64)>)> {
    let s = settings.map(|s| s.inner.clone()).unwrap_or_default();
    let map = clusters.map(|c| &c.inner);
    let (params, log) = py
        .detach(|| pipeline::train_model(&prepared.inner, map, &s))
        .map_err(to_py)?;
    let rows = log
        .records
        .iter()
        .map(|r| (r.epoch, r.utility_loss, r.fairness_loss, r.combined_loss))
        .collect();
    let checkpoint = Checkpoint {
        config: s.train_config(),
        params,
    };
    Ok((PyModel { checkpoint }, rows))
}

/// Evaluation report as a dict (the same fields as the JSON report).
#[pyfunction]
#[pyo3(signature = (prepared, model, settings = None))]
fn evaluate<'py>(
    py: Python<'py>,
    prepared: &PyPrepared,
    model: &PyModel,
    settings: Option<&PySettings>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = settings.map(|s| s.inner.clone()).unwrap_or_default();
    let report = py
        .detach(|| pipeline::evaluate_model(&prepared.inner, model.params(), &s))
        .map_err(to_py)?;
    let json = report.to_json().map_err(to_py)?;
    py.import("json")?.call_method1("loads", (json,))
}

/// Constrained dominant set of a weight matrix with `constraint` as the
/// target vertex. Returns `(member, importance)` pairs.
#[pyfunction]
#[pyo3(signature = (weights, constraint = 0, alpha_margin = 1.0))]
fn constrained_cluster(weights: Vec<Vec<f64>>, constraint: usize, alpha_margin: f64) -> PyResult<Vec<(usize, f64)>> {
    let h = AffinityMatrix::from_weights(matrix(weights)?, constraint).map_err(to_py)?;
    let c = solve_constrained_cluster(&h, alpha_margin, &Default::default()).map_err(to_py)?;
    Ok(c.members.iter().map(|m| (m.user, m.importance)).collect())
}

/// Exhaustive constrained dominant set (small graphs only).
#[pyfunction]
#[pyo3(signature = (weights, constraint = 0))]
fn brute_force_cluster(weights: Vec<Vec<f64>>, constraint: usize) -> PyResult<Vec<usize>> {
    let h = AffinityMatrix::from_weights(matrix(weights)?, constraint).map_err(to_py)?;
    brute_force_constrained_cluster(&h, constraint).map_err(to_py)
}

#[pyfunction]
fn dominant_set(weights: Vec<Vec<f64>>, members: Vec<usize>) -> PyResult<bool> {
    let h = AffinityMatrix::from_weights(matrix(weights)?, 0).map_err(to_py)?;
    let mut members = members;
    members.sort_unstable();
    members.dedup();
    is_dominant_set(&h, &members).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (weights, constraint = 0, margin = 1.0))]
fn alpha(weights: Vec<Vec<f64>>, constraint: usize, margin: f64) -> PyResult<f64> {
    let h = AffinityMatrix::from_weights(matrix(weights)?, constraint).map_err(to_py)?;
    compute_alpha(&h, margin).map_err(to_py)
}

#[pymodule]
fn pyucds(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySettings>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPrepared>()?;
    m.add_class::<PyClusters>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(constrained_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(dominant_set, m)?)?;
    m.add_function(wrap_pyfunction!(alpha, m)?)?;
    Ok(())
}
