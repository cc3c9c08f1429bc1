//! Python bindings: the channel, the server-side estimators, the MSE and
//! bound formulas, and the experiment commands.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use sbfl::aggregate::{AggregationInput, Aggregator, Formulation, PriorParams};
use sbfl::channel::{transmit as channel_transmit, LinkState};
use sbfl::harness::config::{self, ExperimentConfig, MseGridConfig, OracleConfig};
use sbfl::harness::{cmd_bound_check, cmd_mse_verify, cmd_oracle, cmd_sweep, cmd_train};
use sbfl::prior::{sign_quantize, GaussianPrior, LaplacianPrior};
use sbfl::rng::{Purpose, Substreams};
use sbfl::theory::{self, ConvergenceBoundInputs};
use sbfl::Error;

pyo3::create_exception!(sbfl_py, ConfigError, PyValueError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => ConfigError::new_err(e.to_string()),
        Error::InvalidInput(_) | Error::Capability(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn formulation(mode: &str) -> PyResult<Formulation> {
    mode.parse().map_err(err)
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn rows<T: Serialize>(py: Python<'_>, items: &[T]) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(items).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Channel state of one device: fading gain and noise variance.
#[pyclass(frozen, from_py_object, name = "LinkState")]
#[derive(Clone, Copy)]
struct PyLink {
    #[pyo3(get)]
    h: f64,
    #[pyo3(get)]
    sigma2: f64,
}

#[pymethods]
impl PyLink {
    #[new]
    fn new(h: f64, sigma2: f64) -> PyResult<Self> {
        LinkState::new(h, sigma2).map_err(err)?;
        Ok(Self { h, sigma2 })
    }

    fn __repr__(&self) -> String {
        format!("LinkState(h={}, sigma2={})", self.h, self.sigma2)
    }
}

impl From<PyLink> for LinkState {
    fn from(l: PyLink) -> Self {
        LinkState { h: l.h, sigma2: l.sigma2 }
    }
}

/// Gaussian prior `(mu, nu)` of one device's gradient coordinates.
#[pyclass(frozen, from_py_object, name = "GaussianPrior")]
#[derive(Clone, Copy)]
struct PyGaussianPrior {
    #[pyo3(get)]
    mu: f64,
    #[pyo3(get)]
    nu: f64,
}

#[pymethods]
impl PyGaussianPrior {
    #[new]
    fn new(mu: f64, nu: f64) -> PyResult<Self> {
        if !(nu >= 0.0 && nu.is_finite() && mu.is_finite()) {
            return Err(PyValueError::new_err("need finite mu and nu >= 0"));
        }
        Ok(Self { mu, nu })
    }

    fn __repr__(&self) -> String {
        format!("GaussianPrior(mu={}, nu={})", self.mu, self.nu)
    }
}

impl From<PyGaussianPrior> for GaussianPrior {
    fn from(p: PyGaussianPrior) -> Self {
        GaussianPrior { mu: p.mu, nu: p.nu }
    }
}

fn links(ls: &[PyLink]) -> Vec<LinkState> {
    ls.iter().map(|&l| l.into()).collect()
}

fn priors(ps: &[PyGaussianPrior]) -> Vec<GaussianPrior> {
    ps.iter().map(|&p| p.into()).collect()
}

/// Sends `sign(g)` over the link; the noise stream is keyed by `seed`.
#[pyfunction]
#[pyo3(signature = (g, link, seed=0))]
fn transmit(g: Vec<f64>, link: PyLink, seed: u64) -> Vec<f64> {
    let mut rng = Substreams::new(seed).stream(Purpose::Noise, 0, 0);
    channel_transmit(&sign_quantize(&g), link.into(), &mut rng)
}

/// Server estimate of the gradient sum. `aggregator` is one of
/// `mmse_gaussian`, `mmse_laplacian`, `blmmse`, `high_snr_mmse`,
/// `high_snr_blmmse`. For `mmse_laplacian` the second prior parameter is
/// read as the scale `lambda`.
#[pyfunction]
#[pyo3(signature = (received, priors, links, aggregator="mmse_gaussian", mode="corrected"))]
fn aggregate(
    received: Vec<Vec<f64>>,
    priors: Vec<PyGaussianPrior>,
    links: Vec<PyLink>,
    aggregator: &str,
    mode: &str,
) -> PyResult<Vec<f64>> {
    let f = formulation(mode)?;
    let agg = match aggregator {
        "mmse_gaussian" => Aggregator::MmseGaussian(f),
        "mmse_laplacian" => Aggregator::MmseLaplacian(f),
        "blmmse" => Aggregator::Blmmse(f),
        "high_snr_mmse" => Aggregator::HighSnrMmse,
        "high_snr_blmmse" => Aggregator::HighSnrBlmmse,
        other => return Err(PyValueError::new_err(format!("unknown aggregator `{other}`"))),
    };
    let params = priors
        .iter()
        .map(|p| match agg {
            Aggregator::MmseLaplacian(_) => PriorParams::Laplacian(LaplacianPrior { mu: p.mu, lambda: p.nu }),
            _ => PriorParams::Gaussian((*p).into()),
        })
        .collect();
    let input = AggregationInput::new(received, params, self::links(&links)).map_err(err)?;
    agg.apply(&input).map_err(err)
}

/// Minimum MSE of the conditional-mean aggregator by quadrature.
#[pyfunction]
#[pyo3(signature = (priors, links, m, mode="corrected"))]
fn mse_quadrature(priors: Vec<PyGaussianPrior>, links: Vec<PyLink>, m: usize, mode: &str) -> PyResult<f64> {
    let r = theory::mse_quadrature_with(&self::priors(&priors), &self::links(&links), m, formulation(mode)?).map_err(err)?;
    Ok(r.value)
}

#[pyfunction]
#[pyo3(signature = (priors, links, m, mode="corrected"))]
fn blmmse_mse_closed_form(priors: Vec<PyGaussianPrior>, links: Vec<PyLink>, m: usize, mode: &str) -> PyResult<f64> {
    let r = theory::blmmse_mse_closed_form(&self::priors(&priors), &self::links(&links), m, formulation(mode)?).map_err(err)?;
    Ok(r.value)
}

#[pyfunction]
fn mse_high_snr_closed_form(priors: Vec<PyGaussianPrior>, m: usize) -> f64 {
    theory::mse_high_snr_closed_form(&self::priors(&priors), m).value
}

/// Monte Carlo MSE of one aggregator; returns `(mse, stderr)`.
#[pyfunction]
#[pyo3(signature = (priors, links, m, samples, aggregator="mmse_gaussian", mode="corrected", seed=0))]
#[allow(clippy::too_many_arguments)]
fn mse_monte_carlo(
    priors: Vec<PyGaussianPrior>,
    links: Vec<PyLink>,
    m: usize,
    samples: usize,
    aggregator: &str,
    mode: &str,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let f = formulation(mode)?;
    let agg = match aggregator {
        "mmse_gaussian" => Aggregator::MmseGaussian(f),
        "blmmse" => Aggregator::Blmmse(f),
        "high_snr_mmse" => Aggregator::HighSnrMmse,
        "high_snr_blmmse" => Aggregator::HighSnrBlmmse,
        other => return Err(PyValueError::new_err(format!("unsupported aggregator `{other}`"))),
    };
    let r = theory::mse_monte_carlo(
        |i: &AggregationInput| agg.apply(i),
        &self::priors(&priors),
        &self::links(&links),
        m,
        samples,
        Substreams::new(seed),
    )
    .map_err(err)?;
    Ok((r.value, r.stderr))
}

/// Convergence bound after `rounds` rounds. `mode="paper-literal"` is the
/// usual printed form; `"corrected"` divides the noise term by gamma.
#[pyfunction]
#[pyo3(signature = (rounds, gamma, smoothness, sigma_mse, f0, fstar, mode="paper-literal"))]
fn convergence_bound(
    rounds: usize,
    gamma: f64,
    smoothness: f64,
    sigma_mse: f64,
    f0: f64,
    fstar: f64,
    mode: &str,
) -> PyResult<f64> {
    let inputs = ConvergenceBoundInputs { rounds, gamma, smoothness, sigma_mse, f0, fstar };
    theory::convergence_bound_with(&inputs, formulation(mode)?).map_err(err)
}

fn experiment(text: &str, out: Option<String>) -> PyResult<ExperimentConfig> {
    let mut c: ExperimentConfig = config::parse(text).map_err(err)?;
    if let Some(o) = out {
        c.output.dir = o.into();
    }
    c.validate().map_err(err)?;
    Ok(c)
}

/// Runs `train` from TOML text; returns the per-run summary rows.
#[pyfunction]
#[pyo3(signature = (config_toml, out=None, jobs=None))]
fn train(py: Python<'_>, config_toml: &str, out: Option<String>, jobs: Option<usize>) -> PyResult<Py<PyAny>> {
    let c = experiment(config_toml, out)?;
    let res = py.detach(|| cmd_train(&c, jobs)).map_err(err)?;
    rows(py, &res.summary)
}

/// Runs `sweep`; returns one row per (algorithm, gamma, delta) cell.
#[pyfunction]
#[pyo3(signature = (config_toml, out=None, jobs=None))]
fn sweep(py: Python<'_>, config_toml: &str, out: Option<String>, jobs: Option<usize>) -> PyResult<Py<PyAny>> {
    let c = experiment(config_toml, out)?;
    let res = py.detach(|| cmd_sweep(&c, jobs)).map_err(err)?;
    rows(py, &res.aggregate)
}

/// Runs `bound-check`; returns the per-round rows.
#[pyfunction]
#[pyo3(signature = (config_toml, out=None, jobs=None))]
fn bound_check(py: Python<'_>, config_toml: &str, out: Option<String>, jobs: Option<usize>) -> PyResult<Py<PyAny>> {
    let c = experiment(config_toml, out)?;
    let (_, check) = py.detach(|| cmd_bound_check(&c, jobs)).map_err(err)?;
    rows(py, &check.rows)
}

#[pyfunction]
#[pyo3(signature = (config_toml="", out=None, mode="corrected"))]
fn mse_verify(py: Python<'_>, config_toml: &str, out: Option<String>, mode: &str) -> PyResult<Py<PyAny>> {
    let mut c: MseGridConfig = if config_toml.is_empty() { MseGridConfig::default() } else { config::parse(config_toml).map_err(err)? };
    if let Some(o) = out {
        c.output.dir = o.into();
    }
    let f = formulation(mode)?;
    let res = py.detach(|| cmd_mse_verify(&c, f)).map_err(err)?;
    rows(py, &res)
}

#[pyfunction]
#[pyo3(signature = (config_toml="", out=None))]
fn oracle(py: Python<'_>, config_toml: &str, out: Option<String>) -> PyResult<Py<PyAny>> {
    let mut c: OracleConfig = if config_toml.is_empty() { OracleConfig::default() } else { config::parse(config_toml).map_err(err)? };
    if let Some(o) = out {
        c.output.dir = o.into();
    }
    let res = py.detach(|| cmd_oracle(&c)).map_err(err)?;
    rows(py, &res)
}

#[pymodule]
fn sbfl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_class::<PyLink>()?;
    m.add_class::<PyGaussianPrior>()?;
    m.add_function(wrap_pyfunction!(transmit, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(mse_quadrature, m)?)?;
    m.add_function(wrap_pyfunction!(blmmse_mse_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(mse_high_snr_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(mse_monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_bound, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(bound_check, m)?)?;
    m.add_function(wrap_pyfunction!(mse_verify, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
