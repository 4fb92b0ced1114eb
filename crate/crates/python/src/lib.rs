//! Python bindings: run the pipeline stages from a config JSON string and
//! read back the artifacts they write.

use std::path::Path;

use modscan::pipeline::{self, EvaluateInput, RunConfig, RunReport};
use modscan::{io, register, Error};
use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(modscan_py, ModscanError, PyException);
create_exception!(modscan_py, ConfigError, ModscanError);
create_exception!(modscan_py, PhysicsError, ModscanError);
create_exception!(modscan_py, GraphError, ModscanError);
create_exception!(modscan_py, DivergenceError, ModscanError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Physics(_) | Error::Aliased { .. } => PhysicsError::new_err(msg),
        Error::Disconnected(_) | Error::Graph { .. } | Error::Featureless => GraphError::new_err(msg),
        Error::Diverged { .. } | Error::Divergence(_) => DivergenceError::new_err(msg),
        Error::Config(_) | Error::MissingModulator => ConfigError::new_err(msg),
        _ => ModscanError::new_err(msg),
    }
}

fn config(text: &str, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::from_json(text).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn report_json(r: modscan::Result<RunReport>) -> PyResult<String> {
    let r = r.map_err(to_py)?;
    serde_json::to_string(&r).map_err(|e| ModscanError::new_err(e.to_string()))
}

/// Simulate a dataset into `out`; returns the stage report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out, seed=None, overwrite=false))]
fn simulate(py: Python<'_>, config_json: &str, out: &str, seed: Option<u64>, overwrite: bool) -> PyResult<String> {
    let cfg = config(config_json, seed)?;
    report_json(py.detach(|| pipeline::simulate_stage(&cfg, Path::new(out), overwrite)))
}

/// Run simulate → reconstruct → positions → assemble → evaluate into `out`.
#[pyfunction]
#[pyo3(signature = (config_json, out, seed=None, overwrite=false))]
fn run_pipeline(py: Python<'_>, config_json: &str, out: &str, seed: Option<u64>, overwrite: bool) -> PyResult<String> {
    let cfg = config(config_json, seed)?;
    report_json(py.detach(|| pipeline::pipeline(&cfg, Path::new(out), overwrite)))
}

/// Calibrate a modulator from `dataset` (or from the config's calibration
/// section when absent).
#[pyfunction]
#[pyo3(signature = (config_json, out, dataset=None, probe=None, seed=None, overwrite=false))]
fn calibrate(
    py: Python<'_>,
    config_json: &str,
    out: &str,
    dataset: Option<&str>,
    probe: Option<&str>,
    seed: Option<u64>,
    overwrite: bool,
) -> PyResult<String> {
    let cfg = config(config_json, seed)?;
    report_json(py.detach(|| {
        pipeline::calibrate_stage(
            &cfg,
            dataset.map(Path::new),
            probe.map(Path::new),
            Path::new(out),
            overwrite,
        )
    }))
}

/// Score recovered positions against a dataset's ground truth.
#[pyfunction]
#[pyo3(signature = (positions, truth, out, overwrite=false))]
fn evaluate(positions: &str, truth: &str, out: &str, overwrite: bool) -> PyResult<String> {
    let input = EvaluateInput {
        positions: positions.into(),
        truth: truth.into(),
        reports: Vec::new(),
    };
    report_json(pipeline::evaluate_stage(&[input], Path::new(out), overwrite))
}

/// `(rows, cols, pitch_m, values)` of a `.cfield` file, values row-major.
#[pyfunction]
fn read_cfield(path: &str) -> PyResult<(usize, usize, f64, Vec<Complex64>)> {
    let f = io::read_cfield(path).map_err(to_py)?;
    let (h, w) = f.shape();
    Ok((h, w, f.pitch(), f.data().iter().copied().collect()))
}

/// `[(y_px, x_px), ...]` from a positions CSV.
#[pyfunction]
fn read_positions(path: &str) -> PyResult<Vec<(f64, f64)>> {
    io::read_positions(path).map_err(to_py)
}

/// Mean, std, RMS and max per-frame error after removing the mean offset.
#[pyfunction]
fn score_positions(recovered: Vec<(f64, f64)>, truth: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64, f64)> {
    let s = register::score_positions(&recovered, &truth).map_err(to_py)?;
    Ok((s.mean, s.std, s.rms, s.max))
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(PyValueError::new_err("spearman needs two sequences of equal length ≥ 2"));
    }
    Ok(pipeline::spearman(&x, &y))
}

#[pymodule]
fn modscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("ModscanError", py.get_type::<ModscanError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("PhysicsError", py.get_type::<PhysicsError>())?;
    m.add("GraphError", py.get_type::<GraphError>())?;
    m.add("DivergenceError", py.get_type::<DivergenceError>())?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_cfield, m)?)?;
    m.add_function(wrap_pyfunction!(read_positions, m)?)?;
    m.add_function(wrap_pyfunction!(score_positions, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    Ok(())
}
