//! Python bindings: datasets, training, evaluation and the numeric kernels.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scd_core::corpus::{
    dataset_stats, filter_min_interactions, load_qmatrix, load_responses, split_train_test, QMatrix, ResponseSet,
};
use scd_core::diffcore::Matrix;
use scd_core::error::ScdError;
use scd_core::eval::{self, Buckets};
use scd_core::model::{diagnose, embed, predict};
use scd_core::objectives::infonce_value;
use scd_core::synth::{generate, SynthConfig};
use scd_core::train::{Checkpoint, TrainConfig, Trainer as CoreTrainer};
use scd_core::viewgen::{self, DropoutParams};

fn err(e: ScdError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py_json(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Responses plus the exercise-concept matrix over the same ids.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    responses: ResponseSet,
    q: QMatrix,
}

#[pymethods]
impl Dataset {
    /// Loads CSV files, keeping students with more than `min_interactions` records.
    #[staticmethod]
    #[pyo3(signature = (responses, qmatrix, min_interactions = 0))]
    fn load(responses: PathBuf, qmatrix: PathBuf, min_interactions: usize) -> PyResult<Self> {
        let mut rs = load_responses(&responses).map_err(err)?;
        if min_interactions > 0 {
            rs = filter_min_interactions(&rs, min_interactions).map_err(err)?;
        }
        let q = load_qmatrix(&qmatrix, &rs).map_err(err)?;
        Ok(Self { responses: rs, q })
    }

    /// Long-tailed synthetic data with planted mastery.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, students = 200, exercises = 50, concepts = 10, selection_bias = 0.0))]
    fn synthetic(seed: u64, students: usize, exercises: usize, concepts: usize, selection_bias: f64) -> PyResult<Self> {
        let d = generate(&SynthConfig {
            seed,
            n_students: students,
            n_exercises: exercises,
            n_concepts: concepts,
            selection_bias,
            ..SynthConfig::default()
        })
        .map_err(err)?;
        Ok(Self { responses: d.responses, q: d.q })
    }

    /// Per-student split; both halves keep the id space.
    #[pyo3(signature = (train_ratio = 0.8, seed = 0))]
    fn split(&self, train_ratio: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let s = split_train_test(&self.responses, train_ratio, seed).map_err(err)?;
        Ok((
            Dataset { responses: s.train, q: self.q.clone() },
            Dataset { responses: s.test, q: self.q.clone() },
        ))
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &dataset_stats(&self.responses, &self.q))
    }

    /// `(student, exercise, score)` in dense ids.
    fn records(&self) -> Vec<(usize, usize, u8)> {
        self.responses.records().iter().map(|r| (r.student, r.exercise, r.score)).collect()
    }

    fn student_keys(&self) -> Vec<String> {
        self.responses.student_keys().to_vec()
    }

    fn exercise_keys(&self) -> Vec<String> {
        self.responses.exercise_keys().to_vec()
    }

    fn __len__(&self) -> usize {
        self.responses.len()
    }
}

/// A model under training. Construct from a dataset or a checkpoint file.
#[pyclass]
pub struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    /// `config` is a dict with the same keys as the JSON config file.
    #[new]
    #[pyo3(signature = (train, config = None))]
    fn new(train: &Dataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = match config {
            Some(c) => TrainConfig::from_json(&from_py_json(c.as_any())?).map_err(err)?,
            None => TrainConfig::default(),
        };
        let inner = CoreTrainer::new(cfg, train.responses.clone(), train.q.clone()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { inner: CoreTrainer::from_checkpoint(ck).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(err)
    }

    /// Runs one epoch and returns its loss breakdown.
    fn train_epoch(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let b = self.inner.train_epoch().map_err(err)?;
        to_py(py, &b)
    }

    /// Runs the remaining configured epochs.
    fn run(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let h = self.inner.run().map_err(err)?.to_vec();
        to_py(py, &h)
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.inner.epochs_done()
    }

    fn history(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.history())
    }

    /// Scores a dataset over the training id space and returns the report.
    #[pyo3(signature = (test, bucket_width = 5, buckets = 9))]
    fn evaluate(&self, py: Python<'_>, test: &Dataset, bucket_width: usize, buckets: usize) -> PyResult<Py<PyAny>> {
        let t = &self.inner;
        let report = eval::evaluate(
            t.params(),
            t.graph(),
            t.q(),
            t.train_set(),
            test.responses.records(),
            Buckets { width: bucket_width, count: buckets },
        )
        .map_err(err)?;
        to_py(py, &report)
    }

    /// Correct-answer probabilities for `(student, exercise)` dense id pairs.
    fn predict(&self, pairs: Vec<(usize, usize)>) -> PyResult<Vec<f64>> {
        let t = &self.inner;
        let diag = diagnose(t.params(), &embed(t.params(), t.graph()).map_err(err)?);
        predict(t.params(), &diag, t.q(), &pairs).map_err(err)
    }

    /// `(mastery, difficulty)` as nested lists, students by concepts and
    /// exercises by concepts.
    fn diagnosis(&self) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let t = &self.inner;
        let d = diagnose(t.params(), &embed(t.params(), t.graph()).map_err(err)?);
        Ok((to_rows(&d.mastery), to_rows(&d.difficulty)))
    }
}

/// Keep probability of an edge whose head has indegree `degree`.
#[pyfunction]
#[pyo3(signature = (degree, k = 1.0, theta = 0.01, p_min = 0.3))]
fn keep_probability(degree: usize, k: f64, theta: f64, p_min: f64) -> PyResult<f64> {
    let p = DropoutParams { k, theta, p_min };
    p.validate().map_err(err)?;
    Ok(p.keep_probability(degree))
}

/// Theoretical and observed retention on a star graph with the given
/// student degrees.
#[pyfunction]
#[pyo3(signature = (degrees, draws = 1000, seed = 0, k = 1.0, theta = 0.01, p_min = 0.3))]
fn retention_audit(
    py: Python<'_>,
    degrees: Vec<usize>,
    draws: usize,
    seed: u64,
    k: f64,
    theta: f64,
    p_min: f64,
) -> PyResult<Py<PyAny>> {
    if degrees.contains(&0) {
        return Err(PyValueError::new_err("degrees must be positive"));
    }
    let split = viewgen::star_fixture(&degrees);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = viewgen::retention_audit(&split, &DropoutParams { k, theta, p_min }, draws, &mut rng).map_err(err)?;
    to_py(py, &rows)
}

/// Contrastive loss between row-aligned embeddings.
#[pyfunction]
#[pyo3(signature = (z1, z2, tau = 0.5, include_positive = false))]
fn infonce(z1: Vec<Vec<f64>>, z2: Vec<Vec<f64>>, tau: f64, include_positive: bool) -> PyResult<f64> {
    infonce_value(&to_matrix(z1)?, &to_matrix(z2)?, tau, include_positive).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (preds, labels, threshold = 0.5))]
fn accuracy(preds: Vec<f64>, labels: Vec<f64>, threshold: f64) -> PyResult<f64> {
    eval::accuracy(&preds, &labels, threshold).map_err(err)
}

#[pyfunction]
fn rmse(preds: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    eval::rmse(&preds, &labels).map_err(err)
}

#[pymodule]
fn scdiag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(keep_probability, m)?)?;
    m.add_function(wrap_pyfunction!(retention_audit, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    Ok(())
}
