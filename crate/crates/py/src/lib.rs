//! Python bindings for the `fbsnn` solvers.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fbsnn::bench::{self, ExperimentConfig, ExperimentOverrides, Frame};
use fbsnn::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Configuration(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(id: &str, overrides: Option<&str>, full_budget: bool) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::for_id(id).map_err(to_py)?;
    if full_budget {
        cfg.full_budget();
    }
    if let Some(text) = overrides {
        let o: ExperimentOverrides = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        cfg.apply(&o).map_err(to_py)?;
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Known experiment identifiers.
#[pyfunction]
fn experiment_ids() -> Vec<&'static str> {
    bench::EXPERIMENT_IDS.to_vec()
}

/// Resolved configuration of an experiment as a JSON string.
#[pyfunction]
#[pyo3(signature = (experiment, overrides=None, full_budget=false))]
fn experiment_config(experiment: &str, overrides: Option<&str>, full_budget: bool) -> PyResult<String> {
    json(&config(experiment, overrides, full_budget)?)
}

/// Train an experiment and return its metrics report as a JSON string.
#[pyfunction]
#[pyo3(signature = (experiment, overrides=None, seed=None, full_budget=false, out=None))]
fn run(
    py: Python<'_>,
    experiment: &str,
    overrides: Option<&str>,
    seed: Option<u64>,
    full_budget: bool,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let mut cfg = config(experiment, overrides, full_budget)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let report = py.detach(|| bench::run_experiment(&cfg, out.as_deref())).map_err(to_py)?;
    json(&report)
}

/// Sample a checkpoint on a uniform grid. Returns `(header, rows)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, grid, times, physical=false))]
fn fields(checkpoint: PathBuf, grid: usize, times: Vec<f64>, physical: bool) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let model = bench::model_from_checkpoint(&checkpoint).map_err(to_py)?;
    let frame = if physical { Frame::Physical } else { Frame::Network };
    let table = bench::emit_fields(&model, grid, &times, frame).map_err(to_py)?;
    Ok((table.header, table.rows))
}

/// Eigen-decomposition of the stabilized Cahn-Hilliard operator.
/// Returns `(lambda1, lambda2, R, R_inv)`.
#[pyfunction]
fn diagonalize(l_d: f64, gamma: f64, delta: f64, s: f64) -> PyResult<(f64, f64, [[f64; 2]; 2], [[f64; 2]; 2])> {
    let d = fbsnn::problems::ch_diagonalize(l_d, gamma, delta, s).map_err(to_py)?;
    Ok((d.lambda1, d.lambda2, d.r, d.r_inv))
}

/// Closed-form self-checks as `(name, value, tolerance, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn checks(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = py.detach(|| fbsnn::verify::run_checks(seed)).map_err(to_py)?;
    Ok(results.into_iter().map(|c| (c.name, c.value, c.tolerance, c.passed)).collect())
}

#[pymodule]
fn fbsnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(experiment_ids, m)?)?;
    m.add_function(wrap_pyfunction!(experiment_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(fields, m)?)?;
    m.add_function(wrap_pyfunction!(diagonalize, m)?)?;
    m.add_function(wrap_pyfunction!(checks, m)?)?;
    Ok(())
}
