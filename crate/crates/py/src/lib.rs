//! Python bindings for the pieces that are useful standalone: Lorenz
//! measurement generation, the neighbor-fraction dimension scan, the mask
//! rule, and the scoring helpers.

use lode_core::data::{add_noise, integrate_lorenz, measure_x, LorenzParams, Provenance};
use lode_core::embedding::{self, delay_rows, mask_from_gamma, FnnThresholds};
use lode_core::evaluation;
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: lode_core::Error) -> PyErr {
    use lode_core::Error::*;
    match e {
        Usage(m) | Config(m) => PyValueError::new_err(m),
        Numeric(m) => PyArithmeticError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Lorenz x-measurement series as (times, values). `eta` > 0 adds Gaussian
/// noise with standard deviation eta·std(signal), seeded for reproducibility.
#[pyfunction]
#[pyo3(signature = (ic, dt, steps, eta=0.0, seed=7))]
fn lorenz_series(
    ic: [f64; 3],
    dt: f64,
    steps: usize,
    eta: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let traj = integrate_lorenz(ic, dt, steps, &LorenzParams::default()).map_err(to_py)?;
    let meta = Provenance { ic: Some(ic), dt: Some(dt), eta: Some(eta), seed: Some(seed) };
    let clean = measure_x(&traj, dt, meta);
    let series = if eta > 0.0 {
        add_noise(&clean, eta, &mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        clean
    };
    Ok((series.times, series.values))
}

/// Delay vectors [x[i], x[i−lag], ..., x[i−(m−1)·lag]] as a list of rows;
/// the first row starts at index (m−1)·lag.
#[pyfunction]
#[pyo3(signature = (values, m, lag, count=None))]
fn delay_vectors(
    values: Vec<f64>,
    m: usize,
    lag: usize,
    count: Option<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    if m < 2 || lag == 0 {
        return Err(PyValueError::new_err("need m >= 2 and lag >= 1"));
    }
    let count = count.unwrap_or_else(|| values.len().saturating_sub((m - 1) * lag));
    let flat = delay_rows(&values, m, lag, count).map_err(to_py)?;
    Ok(flat.chunks(m).map(|c| c.to_vec()).collect())
}

/// False-nearest-neighbor fractions γ₁..γ_m of a scalar series; γ_d close
/// to zero means d delay coordinates suffice.
#[pyfunction]
#[pyo3(signature = (values, m, lag, count=None, r_tol=10.0, a_tol=2.0))]
fn fnn_fractions(
    values: Vec<f64>,
    m: usize,
    lag: usize,
    count: Option<usize>,
    r_tol: f64,
    a_tol: f64,
) -> PyResult<Vec<f64>> {
    if m < 2 || lag == 0 {
        return Err(PyValueError::new_err("need m >= 2 and lag >= 1"));
    }
    let count = count.unwrap_or_else(|| values.len().saturating_sub((m - 1) * lag));
    let batch = delay_rows(&values, m, lag, count).map_err(to_py)?;
    embedding::fnn_fractions(&batch, count, m, &FnnThresholds { r_tol, a_tol }).map_err(to_py)
}

/// Binary mask and embedding dimension from neighbor fractions: keep the
/// contiguous prefix of coordinates whose fraction exceeds epsilon.
#[pyfunction]
fn mask(gamma: Vec<f64>, epsilon: f64) -> PyResult<(Vec<f64>, usize)> {
    if gamma.is_empty() {
        return Err(PyValueError::new_err("gamma is empty"));
    }
    Ok(mask_from_gamma(&gamma, epsilon))
}

/// Mean squared error normalized by the truth's variance.
#[pyfunction]
fn nmse(truth: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    evaluation::nmse(&truth, &pred).map_err(to_py)
}

/// Longest time the prediction stays within tol·range(truth) of the truth,
/// with samples at dt, 2·dt, ... after the forecast origin.
#[pyfunction]
fn forecast_horizon(truth: Vec<f64>, pred: Vec<f64>, dt: f64, tol: f64) -> PyResult<f64> {
    Ok(evaluation::forecast_horizon(&truth, &pred, dt, tol))
}

#[pymodule]
fn lode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lorenz_series, m)?)?;
    m.add_function(wrap_pyfunction!(delay_vectors, m)?)?;
    m.add_function(wrap_pyfunction!(fnn_fractions, m)?)?;
    m.add_function(wrap_pyfunction!(mask, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(forecast_horizon, m)?)?;
    Ok(())
}
