//! Python module `sphere_lab`: models, checkpoints, spectral diagnostics,
//! the verification suites and the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use sphere_core::config::ExperimentConfig;
use sphere_core::diag::{diagnose, DiagOptions};
use sphere_core::entk::{self, EntkOperator, SlqConfig};
use sphere_core::linalg::Matrix;
use sphere_core::moe::{self, MoeConfig};
use sphere_core::spectral::SpsdMatrix;
use sphere_core::{io, runner, verify, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Format(_) | Error::InvalidArgument(_) | Error::ShapeMismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Matrix::from_vec(n, cols, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Serializes through JSON and returns the matching Python object.
fn to_object<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Spectral-entropy effective rank of a symmetric PSD matrix.
#[pyfunction]
fn effective_rank(m: Vec<Vec<f64>>) -> PyResult<f64> {
    SpsdMatrix::new(matrix(m)?).and_then(|s| s.effective_rank()).map_err(to_py)
}

#[pyclass(name = "MoeModel", module = "sphere_lab")]
struct PyMoeModel {
    inner: moe::MoeModel,
}

#[pymethods]
impl PyMoeModel {
    /// Fresh model from a JSON `MoeConfig` (missing fields take defaults).
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg: MoeConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyMoeModel { inner: moe::init_model(&cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMoeModel { inner: io::load_checkpoint(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_json(&path, &io::Checkpoint::from_model(&self.inner)).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, self.inner.config())
    }

    fn flat_params(&self) -> Vec<f64> {
        self.inner.flat_params()
    }

    fn set_flat_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat_params(&params).map_err(to_py)
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (y, _) = moe::forward(&self.inner, &matrix(x)?).map_err(to_py)?;
        Ok(rows(&y))
    }

    /// Empirical NTK `J Jᵀ` on a batch.
    fn entk(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let k = entk::exact_entk(&self.inner, &matrix(x)?).map_err(to_py)?;
        Ok(rows(k.matrix()))
    }

    /// `r_e(K)` on a batch, exactly or by stochastic Lanczos quadrature.
    #[pyo3(signature = (x, exact = true, probes = 16, steps = 30, seed = 0))]
    fn spectral_plasticity(&self, x: Vec<Vec<f64>>, exact: bool, probes: usize, steps: usize, seed: u64) -> PyResult<f64> {
        let x = matrix(x)?;
        if exact {
            return entk::spectral_plasticity_exact(&self.inner, &x).map_err(to_py);
        }
        let op = EntkOperator::new(&self.inner, &x).map_err(to_py)?;
        let cfg = SlqConfig { num_probes: probes, lanczos_steps: steps, seed, ..SlqConfig::default() };
        entk::spectral_plasticity_slq(&op, &cfg).map_err(to_py)
    }

    /// Full diagnostics report as a dict.
    #[pyo3(signature = (probe, slq_only = false))]
    fn diagnose<'py>(&self, py: Python<'py>, probe: Vec<Vec<f64>>, slq_only: bool) -> PyResult<Bound<'py, PyAny>> {
        let report = diagnose(&self.inner, &matrix(probe)?, &DiagOptions { slq_only, ..DiagOptions::default() })
            .map_err(to_py)?;
        to_object(py, &report)
    }
}

/// Runs the property suites; returns one dict per suite.
#[pyfunction]
#[pyo3(signature = (filter = None))]
fn run_verify<'py>(py: Python<'py>, filter: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let checks = py.detach(|| verify::run_verify(filter, None));
    to_object(py, &checks)
}

/// Runs an experiment config, writes its output directory and returns the
/// summary as a dict.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, jobs = 1))]
fn run_experiment<'py>(py: Python<'py>, config_path: PathBuf, out_dir: PathBuf, jobs: usize) -> PyResult<Bound<'py, PyAny>> {
    let started = io::unix_now();
    let outcome = py
        .detach(|| {
            let cfg = ExperimentConfig::load(&config_path)?;
            let outcome = runner::run_experiment(&cfg, jobs)?;
            runner::write_outputs(&outcome, &config_path, &out_dir, jobs, started)?;
            Ok(outcome)
        })
        .map_err(to_py)?;
    to_object(py, &outcome.summary)
}

#[pymodule]
fn sphere_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMoeModel>()?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
