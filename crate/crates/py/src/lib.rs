//! Python bindings for the rate-distortion-perception toolkit.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rdp_core::config::{parse_str, ConfigError};
use rdp_core::harness::{self, Row};
use rdp_core::rcc::{self, CapPolicy};
use rdp_core::ssode::{self, RhoParam};
use rdp_core::theory;

fn core_err(e: rdp_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_err(e: ConfigError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("covariance must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Accepts a float (shared by all coordinates) or a per-coordinate list.
#[derive(FromPyObject)]
enum RhoArg {
    Uniform(f64),
    PerDim(Vec<f64>),
}

impl From<RhoArg> for RhoParam {
    fn from(r: RhoArg) -> Self {
        match r {
            RhoArg::Uniform(v) => RhoParam::Uniform(v),
            RhoArg::PerDim(v) => RhoParam::PerDim(v),
        }
    }
}

#[pyclass(name = "NoiseSchedule", frozen, from_py_object)]
#[derive(Clone)]
pub struct PySchedule {
    inner: rdp_core::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    /// Linear schedule; defaults to the 1000-step DDPM schedule.
    #[new]
    #[pyo3(signature = (steps = 1000, beta_min = 1e-4, beta_max = 0.02))]
    fn new(steps: usize, beta_min: f64, beta_max: f64) -> PyResult<Self> {
        Ok(Self { inner: rdp_core::NoiseSchedule::linear(steps, beta_min, beta_max).map_err(core_err)? })
    }

    /// The DDPM endpoints rescaled to `steps` steps.
    #[staticmethod]
    fn scaled(steps: usize) -> PyResult<Self> {
        Ok(Self { inner: rdp_core::NoiseSchedule::ddpm_scaled(steps).map_err(core_err)? })
    }

    #[staticmethod]
    fn from_betas(betas: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: rdp_core::NoiseSchedule::from_betas(betas).map_err(core_err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, k: usize) -> PyResult<f64> {
        self.inner.check_t(k).map_err(core_err)?;
        Ok(self.inner.beta(k))
    }

    fn alpha_bar(&self, k: usize) -> PyResult<f64> {
        if k > self.inner.steps() {
            return Err(PyValueError::new_err(format!("index {k} above {}", self.inner.steps())));
        }
        Ok(self.inner.alpha_bar(k))
    }

    fn t_nearest_alpha_bar(&self, target: f64) -> usize {
        self.inner.t_nearest_alpha_bar(target)
    }

    fn __len__(&self) -> usize {
        self.inner.steps()
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(steps={})", self.inner.steps())
    }
}

#[pyclass(name = "GaussianSource", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyGaussian {
    inner: rdp_core::GaussianSource,
}

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let cov = matrix(&cov)?;
        Ok(Self { inner: rdp_core::GaussianSource::new(DVector::from_vec(mean), cov).map_err(core_err)? })
    }

    /// `N(mu0, sigma0^2)`; `sigma0` is a standard deviation.
    #[staticmethod]
    #[pyo3(signature = (mu0 = 0.0, sigma0 = 1.0))]
    fn scalar(mu0: f64, sigma0: f64) -> PyResult<Self> {
        Ok(Self { inner: rdp_core::GaussianSource::scalar(mu0, sigma0).map_err(core_err)? })
    }

    #[staticmethod]
    fn diagonal(means: Vec<f64>, variances: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: rdp_core::GaussianSource::diagonal(&means, &variances).map_err(core_err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().iter().copied().collect()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        nested(self.inner.cov())
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.inner.sample(n, seed).into_iter().map(|v| v.iter().copied().collect()).collect()
    }

    fn log_density(&self, schedule: &PySchedule, k: usize, z: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&schedule.inner, k, &z).map_err(core_err)
    }

    fn score(&self, schedule: &PySchedule, k: usize, z: Vec<f64>) -> PyResult<Vec<f64>> {
        let g = rdp_core::sources::score(&self.inner, &schedule.inner, k, &DVector::from_vec(z)).map_err(core_err)?;
        Ok(g.iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!("GaussianSource(dim={})", self.inner.dim())
    }
}

#[pyclass(name = "GmmSource", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyGmm {
    inner: rdp_core::GmmSource,
}

#[pymethods]
impl PyGmm {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: rdp_core::GmmSource::new(weights, means, variances).map_err(core_err)? })
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        self.inner.sample(n, seed)
    }

    fn log_density(&self, schedule: &PySchedule, k: usize, z: f64) -> PyResult<f64> {
        self.inner.log_density(&schedule.inner, k, z).map_err(core_err)
    }
}

#[pyfunction]
fn dp_scalar(sigma0: f64, alpha_bar_t: f64, p: f64) -> PyResult<f64> {
    theory::dp_scalar(sigma0, alpha_bar_t, p).map_err(core_err)
}

#[pyfunction]
fn dp_multivariate(lambdas: Vec<f64>, alpha_bar_t: f64, p: f64) -> PyResult<f64> {
    theory::dp_multivariate(&lambdas, alpha_bar_t, p).map_err(core_err)
}

/// Rate in nats; raises `ValueError` on an infeasible pair.
#[pyfunction]
fn rdp_scalar(sigma0: f64, d: f64, p: f64) -> PyResult<f64> {
    theory::rdp_scalar(sigma0, d, p).map_err(core_err)
}

#[pyfunction]
fn mutual_info_t(sigma0: f64, alpha_bar_t: f64) -> f64 {
    theory::mutual_info_t(sigma0, alpha_bar_t)
}

/// `(lower, upper)` bits for a channel carrying `info_nats`.
#[pyfunction]
fn rate_bounds(info_nats: f64) -> PyResult<(f64, f64)> {
    theory::rate_bounds(info_nats).map_err(core_err)
}

/// `(D, P)` reached by the decoder at `(t, rho)`.
#[pyfunction]
fn achievable_dp_scalar(sigma0: f64, schedule: &PySchedule, t: usize, rho: f64) -> PyResult<(f64, f64)> {
    let pt = theory::achievable_dp_scalar(sigma0, &schedule.inner, t, rho).map_err(core_err)?;
    Ok((pt.d, pt.p))
}

/// `(D, P, rho)`: the optimal point for budget `p` and the per-dimension
/// `rho` that reaches it.
#[pyfunction]
fn achievable_dp_multivariate(
    lambdas: Vec<f64>,
    schedule: &PySchedule,
    t: usize,
    p: f64,
) -> PyResult<(f64, f64, Vec<f64>)> {
    let (pt, alloc) = theory::achievable_dp_multivariate(&lambdas, &schedule.inner, t, p).map_err(core_err)?;
    Ok((pt.d, pt.p, alloc.rho))
}

#[pyfunction]
fn f_factor(lam: f64, schedule: &PySchedule, t: usize, rho: f64) -> PyResult<f64> {
    ssode::f_factor(lam, &schedule.inner, t, rho).map_err(core_err)
}

/// `(A, B)` with `x_hat = A z_t + B mu0`.
#[pyfunction]
fn recon_coeffs(source: &PyGaussian, schedule: &PySchedule, t: usize, rho: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = ssode::recon_coeffs_exact(&source.inner, &schedule.inner, t, rho).map_err(core_err)?;
    Ok((nested(&c.a), nested(&c.b)))
}

/// Runs the score-scaled ODE from `z_t` down to a reconstruction.
#[pyfunction]
fn decode(source: &PyGaussian, schedule: &PySchedule, z_t: Vec<f64>, t: usize, rho: RhoArg) -> PyResult<Vec<f64>> {
    let x = ssode::decode(&DVector::from_vec(z_t), t, &rho.into(), &schedule.inner, &source.inner).map_err(core_err)?;
    Ok(x.iter().copied().collect())
}

#[pyfunction]
fn zipf_codelength(index: u64, info_nats: f64) -> f64 {
    rcc::zipf_codelength(index, info_nats)
}

/// Encodes `x` progressively down to level `t` and decodes it back.
/// Returns a dict with `indices`, `z_t`, `bits`, `kl_nats`, `cap_hits`.
#[pyfunction]
#[pyo3(signature = (source, schedule, x, t, seed = 0, trial = 0))]
fn chain_round_trip<'py>(
    py: Python<'py>,
    source: &PyGaussian,
    schedule: &PySchedule,
    x: Vec<f64>,
    t: usize,
    seed: u64,
    trial: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let xv = DVector::from_vec(x);
    let code = rcc::chain_encode(&xv, t, &source.inner, &schedule.inner, seed, trial, CapPolicy::default())
        .map_err(core_err)?;
    let back = rcc::chain_decode(&code.transcripts, t, &source.inner, &schedule.inner, seed, trial).map_err(core_err)?;
    if back != code.z_t {
        return Err(PyRuntimeError::new_err("decoder diverged from encoder"));
    }
    let out = PyDict::new(py);
    out.set_item("indices", code.transcripts.iter().map(|tr| tr.index).collect::<Vec<_>>())?;
    out.set_item("z_t", back.iter().copied().collect::<Vec<_>>())?;
    out.set_item("bits", code.total_bits)?;
    out.set_item("kl_nats", code.total_kl_nats)?;
    out.set_item("cap_hits", code.cap_hits)?;
    Ok(out)
}

fn row_dict<'py>(py: Python<'py>, r: &Row) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t", r.t)?;
    match &r.rho {
        RhoParam::Uniform(v) => d.set_item("rho", *v)?,
        RhoParam::PerDim(v) => d.set_item("rho", v.clone())?,
    }
    d.set_item("alpha_bar_t", r.alpha_bar_t)?;
    d.set_item("rate_bits", r.rate_bits.value)?;
    d.set_item("rate_bits_se", r.rate_bits.se)?;
    d.set_item("rate_bits_theory", r.rate_bits_theory)?;
    d.set_item("mse", r.mse.value)?;
    d.set_item("mse_se", r.mse.se)?;
    d.set_item("mse_theory", r.mse_theory)?;
    d.set_item("w2sq", r.w2sq.value)?;
    d.set_item("w2sq_se", r.w2sq.se)?;
    d.set_item("w2sq_theory", r.w2sq_theory)?;
    d.set_item("rate_mode", r.rate_mode.as_str())?;
    d.set_item("decode_mode", r.decode_mode.as_str())?;
    d.set_item("cap_hits", r.cap_hits)?;
    d.set_item("check", r.check)?;
    Ok(d)
}

/// Canonical TOML for a configuration string, with defaults filled.
#[pyfunction]
fn validate_config(text: &str) -> PyResult<String> {
    Ok(parse_str(text).map_err(config_err)?.canonical())
}

/// Runs the Monte Carlo sweep described by a TOML configuration string.
/// Returns one dict per `(t, rho)` row.
#[pyfunction]
fn run_sweep<'py>(py: Python<'py>, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = parse_str(config).map_err(config_err)?.experiment();
    let res = py.detach(|| harness::run_sweep(&cfg)).map_err(core_err)?;
    res.rows.iter().map(|r| row_dict(py, r)).collect()
}

#[pymodule]
fn rdptraverse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyGmm>()?;
    m.add_function(wrap_pyfunction!(dp_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(dp_multivariate, m)?)?;
    m.add_function(wrap_pyfunction!(rdp_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_info_t, m)?)?;
    m.add_function(wrap_pyfunction!(rate_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(achievable_dp_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(achievable_dp_multivariate, m)?)?;
    m.add_function(wrap_pyfunction!(f_factor, m)?)?;
    m.add_function(wrap_pyfunction!(recon_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(zipf_codelength, m)?)?;
    m.add_function(wrap_pyfunction!(chain_round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
