//! Python bindings: datasets, single fits, loss functions and the simulation study.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qrlong_core::io::{self, Cell, FitCommandSpec, ReportDocument, SimulateOptions, DEFAULT_PRECISION};
use qrlong_core::model::{self as core_model, LongitudinalDataset, Subject};
use qrlong_core::simulation::ErrorCase;
use qrlong_core::{Error, FitResult, GammaMode, Method, QuantileLevel, SolverConfig};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        4 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn level(tau: f64) -> PyResult<QuantileLevel> {
    QuantileLevel::new(tau).map_err(to_py)
}

/// Longitudinal data grouped by subject.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: LongitudinalDataset,
    columns: Vec<String>,
}

#[pymethods]
impl PyDataset {
    /// One entry per observation; rows of the same subject need not be adjacent.
    #[new]
    #[pyo3(signature = (ids, y, x, intercept = true))]
    fn new(ids: Vec<String>, y: Vec<f64>, x: Vec<Vec<f64>>, intercept: bool) -> PyResult<Self> {
        if ids.len() != y.len() || x.len() != y.len() {
            return Err(PyValueError::new_err("ids, y and x must have the same length"));
        }
        let mut order: Vec<String> = Vec::new();
        let mut groups: Vec<(Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
        for ((id, yi), xi) in ids.into_iter().zip(y).zip(x) {
            let k = match order.iter().position(|o| *o == id) {
                Some(k) => k,
                None => {
                    order.push(id);
                    groups.push((Vec::new(), Vec::new()));
                    order.len() - 1
                }
            };
            groups[k].0.push(xi);
            groups[k].1.push(yi);
        }
        let subjects = order
            .into_iter()
            .zip(groups)
            .map(|(id, (rows, ys))| Subject::from_rows(id, &rows, &ys, intercept))
            .collect::<qrlong_core::Result<Vec<_>>>()
            .map_err(to_py)?;
        let inner = LongitudinalDataset::new(subjects).map_err(to_py)?;
        let p = inner.p();
        let columns = (0..p)
            .map(|k| if intercept && k == 0 { "(Intercept)".to_string() } else { format!("x{}", k + usize::from(!intercept)) })
            .collect();
        Ok(Self { inner, columns })
    }

    /// Reads a long-format CSV file. Returns the dataset and the number of dropped rows.
    #[staticmethod]
    #[pyo3(signature = (path, response, id, covariates = Vec::new(), interactions = Vec::new(), intercept = true))]
    fn from_csv(
        path: PathBuf,
        response: String,
        id: String,
        covariates: Vec<String>,
        interactions: Vec<(String, String)>,
        intercept: bool,
    ) -> PyResult<(Self, usize)> {
        let spec = FitCommandSpec {
            covariates,
            interactions,
            intercept,
            ..FitCommandSpec::new(path, response, id)
        };
        let loaded = io::load_csv(&spec.input, &spec).map_err(to_py)?;
        Ok((
            Self {
                inner: loaded.dataset,
                columns: loaded.columns,
            },
            loaded.dropped_rows,
        ))
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.n_obs()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(m={}, n_obs={}, p={})", self.inner.m(), self.inner.n_obs(), self.inner.p())
    }
}

#[pyclass(name = "FitResult", frozen)]
struct PyFitResult {
    inner: FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.iter().copied().collect()
    }

    #[getter]
    fn std_errors(&self) -> Vec<f64> {
        self.inner.std_errors.iter().copied().collect()
    }

    /// Estimated covariance of `beta`, row by row.
    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        self.inner
            .omega
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau.value()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.as_str()
    }

    #[getter]
    fn rho_hat(&self) -> Vec<f64> {
        self.inner.rho_hat.clone()
    }

    #[pyo3(signature = (level = 0.95))]
    fn conf_int(&self, level: f64) -> PyResult<Vec<(f64, f64)>> {
        qrlong_core::confidence_intervals(&self.inner, level).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(method={}, tau={}, beta={:?}, converged={})",
            self.inner.method.as_str(),
            self.inner.tau.value(),
            self.inner.beta.as_slice(),
            self.inner.converged
        )
    }
}

/// A metadata block and a table, as written by the command-line tool.
#[pyclass(name = "Report", frozen)]
struct PyReport {
    inner: ReportDocument,
}

fn cell_to_py(py: Python<'_>, cell: &Cell) -> PyResult<Py<PyAny>> {
    Ok(match cell {
        Cell::Text(s) => s.into_pyobject(py)?.into_any().unbind(),
        Cell::Number(x) => x.into_pyobject(py)?.into_any().unbind(),
        Cell::Count(n) => n.into_pyobject(py)?.into_any().unbind(),
        Cell::Missing => py.None(),
    })
}

#[pymethods]
impl PyReport {
    #[getter]
    fn metadata(&self) -> Vec<(String, String)> {
        self.inner.metadata.clone()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns.clone()
    }

    /// Table rows; undefined statistics are `None`.
    #[getter]
    fn rows(&self, py: Python<'_>) -> PyResult<Vec<Vec<Py<PyAny>>>> {
        self.inner
            .rows
            .iter()
            .map(|r| r.iter().map(|c| cell_to_py(py, c)).collect())
            .collect()
    }

    #[pyo3(signature = (precision = DEFAULT_PRECISION))]
    fn to_csv(&self, precision: usize) -> PyResult<String> {
        self.inner.to_csv(precision).map_err(to_py)
    }

    #[pyo3(signature = (precision = DEFAULT_PRECISION))]
    fn summary(&self, precision: usize) -> String {
        self.inner.summary_text(precision)
    }
}

/// Fits one estimator ("wi", "pqr" or "aqr") at quantile level `tau`.
#[pyfunction]
#[pyo3(signature = (dataset, tau, method = "pqr", gamma = "hk"))]
fn fit(py: Python<'_>, dataset: &PyDataset, tau: f64, method: &str, gamma: &str) -> PyResult<PyFitResult> {
    let tau = level(tau)?;
    let method: Method = method.parse().map_err(to_py)?;
    let config = SolverConfig {
        gamma_mode: gamma.parse::<GammaMode>().map_err(to_py)?,
        ..SolverConfig::default()
    };
    let data = &dataset.inner;
    let inner = py
        .detach(|| qrlong_core::fit(data, tau, method, &config))
        .map_err(to_py)?;
    Ok(PyFitResult { inner })
}

/// Runs the seeded Monte Carlo study and returns its summary report.
#[pyfunction]
#[pyo3(signature = (
    case = "normal", rho = vec![0.5], m = 500, n = 4, reps = 1000,
    taus = vec![0.25, 0.5, 0.95], methods = vec!["wi".to_string(), "pqr".to_string(), "aqr".to_string()],
    seed = 20150101, gamma = "hk"
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    case: &str,
    rho: Vec<f64>,
    m: usize,
    n: usize,
    reps: usize,
    taus: Vec<f64>,
    methods: Vec<String>,
    seed: u64,
    gamma: &str,
) -> PyResult<PyReport> {
    let options = SimulateOptions {
        case: Some(case.parse::<ErrorCase>().map_err(to_py)?),
        rhos: Some(rho),
        m: Some(m),
        n: Some(n),
        replications: Some(reps),
        taus: Some(taus.into_iter().map(level).collect::<PyResult<_>>()?),
        methods: Some(io::parse_methods(&methods.join(",")).map_err(to_py)?),
        seed: Some(seed),
        gamma: Some(gamma.parse::<GammaMode>().map_err(to_py)?),
        beta: None,
    };
    let settings = options.resolve().map_err(to_py)?;
    let inner = py
        .detach(|| io::run_simulate_command(&settings))
        .map_err(to_py)?;
    Ok(PyReport { inner })
}

/// ρ_τ(u) = u(τ − I(u < 0)).
#[pyfunction]
fn check_loss(u: f64, tau: f64) -> PyResult<f64> {
    core_model::check_loss(u, level(tau)?).map_err(to_py)
}

/// ψ_τ(u) = τ − I(u < 0).
#[pyfunction]
fn score_psi(u: f64, tau: f64) -> PyResult<f64> {
    core_model::score_psi(u, level(tau)?).map_err(to_py)
}

/// τ − 1 + Φ(u / r).
#[pyfunction]
fn smoothed_score(u: f64, r: f64, tau: f64) -> PyResult<f64> {
    core_model::smoothed_score(u, r, level(tau)?).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "qrlong")]
fn qrlong(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(check_loss, m)?)?;
    m.add_function(wrap_pyfunction!(score_psi, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_score, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
