//! Python bindings: `import pyglmmd`.

use std::path::PathBuf;

use glmmd::expfam;
use glmmd::inference::{ci_all, ci_phi as ci_phi_impl, Labels, SdMethod};
use glmmd::model::{load_csv, CsvSchema};
use glmmd::sim::{generate_dataset, run_coverage, SimSetting};
use glmmd::{Error, Family, FitOptions, QuadratureSpec};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_domain() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn family(name: &str) -> PyResult<Family> {
    name.parse().map_err(to_py)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("sigma must be square"));
    }
    Ok(DMatrix::from_fn(d, d, |r, c| rows[r][c]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

#[pyfunction]
fn trigamma(x: f64) -> PyResult<f64> {
    expfam::trigamma(x).map_err(to_py)
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    expfam::digamma(x).map_err(to_py)
}

/// `2 d'(phi)/phi + d''(phi)` for the named family.
#[pyfunction]
fn dispersion_info(family_name: &str, phi: f64) -> PyResult<f64> {
    family(family_name)?.dispersion_info(phi).map_err(to_py)
}

#[pyfunction]
fn log_density(family_name: &str, y: f64, eta: f64, phi: f64) -> PyResult<f64> {
    family(family_name)?.log_density(y, eta, phi).map_err(to_py)
}

/// Wald interval for the dispersion, returned as `(lower, upper)`.
#[pyfunction]
#[pyo3(signature = (phi_hat, family_name, m, n, alpha = 0.05))]
fn ci_phi(phi_hat: f64, family_name: &str, m: usize, n: f64, alpha: f64) -> PyResult<(f64, f64)> {
    let iv = ci_phi_impl(phi_hat, family(family_name)?, m, n, alpha).map_err(to_py)?;
    Ok((iv.lower, iv.upper))
}

#[pyclass(name = "Dataset", module = "pyglmmd")]
#[derive(Clone)]
struct PyDataset {
    inner: glmmd::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from parallel per-observation lists. Rows sharing a
    /// group label form one group.
    #[new]
    #[pyo3(signature = (groups, y, xa, xb = None))]
    fn new(
        groups: Vec<String>,
        y: Vec<f64>,
        xa: Vec<Vec<f64>>,
        xb: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Self> {
        let n = y.len();
        let xb = xb.unwrap_or_else(|| vec![Vec::new(); n]);
        if groups.len() != n || xa.len() != n || xb.len() != n {
            return Err(PyValueError::new_err("all inputs need one entry per observation"));
        }
        let d_a = xa.first().map_or(0, |r| r.len());
        let d_b = xb.first().map_or(0, |r| r.len());
        let obs = groups.into_iter().zip(y).zip(xa.into_iter().zip(xb)).map(
            |((g, y), (xa, xb))| (g, glmmd::Observation { y, xa, xb }),
        );
        let inner = glmmd::Dataset::from_observations(obs, d_a, d_b).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, group_col = "group", y_col = "y", xa_cols = vec![], xb_cols = vec![], xa_intercept = true, xb_intercept = false))]
    fn from_csv(
        path: PathBuf,
        group_col: &str,
        y_col: &str,
        xa_cols: Vec<String>,
        xb_cols: Vec<String>,
        xa_intercept: bool,
        xb_intercept: bool,
    ) -> PyResult<Self> {
        let schema = CsvSchema {
            group_col: group_col.into(),
            y_col: y_col.into(),
            xa_cols,
            xb_cols,
            xa_intercept,
            xb_intercept,
            ..CsvSchema::default()
        };
        Ok(PyDataset {
            inner: load_csv(path, &schema).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(path).map_err(to_py)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn n_total(&self) -> usize {
        self.inner.n_total()
    }

    #[getter]
    fn d_a(&self) -> usize {
        self.inner.d_a()
    }

    #[getter]
    fn d_b(&self) -> usize {
        self.inner.d_b()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(m={}, n_total={}, d_a={}, d_b={})",
            self.inner.m(),
            self.inner.n_total(),
            self.inner.d_a(),
            self.inner.d_b()
        )
    }
}

#[pyclass(name = "Parameters", module = "pyglmmd")]
#[derive(Clone)]
struct PyParameters {
    inner: glmmd::Parameters,
}

#[pymethods]
impl PyParameters {
    #[new]
    fn new(beta_a: Vec<f64>, beta_b: Vec<f64>, sigma: Vec<Vec<f64>>, phi: f64) -> PyResult<Self> {
        let inner = glmmd::Parameters::new(
            DVector::from_vec(beta_a),
            DVector::from_vec(beta_b),
            matrix(&sigma)?,
            phi,
        )
        .map_err(to_py)?;
        Ok(PyParameters { inner })
    }

    #[getter]
    fn beta_a(&self) -> Vec<f64> {
        self.inner.beta_a.iter().copied().collect()
    }

    #[getter]
    fn beta_b(&self) -> Vec<f64> {
        self.inner.beta_b.iter().copied().collect()
    }

    #[getter]
    fn sigma(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.sigma)
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.inner.phi
    }

    fn __repr__(&self) -> String {
        format!(
            "Parameters(beta_a={:?}, beta_b={:?}, sigma={:?}, phi={})",
            self.beta_a(),
            self.beta_b(),
            self.sigma(),
            self.inner.phi
        )
    }
}

#[pyfunction]
#[pyo3(signature = (params, dataset, family_name, nodes = 21))]
fn log_likelihood(
    params: &PyParameters,
    dataset: &PyDataset,
    family_name: &str,
    nodes: usize,
) -> PyResult<f64> {
    glmmd::log_likelihood(
        &params.inner,
        &dataset.inner,
        family(family_name)?,
        &QuadratureSpec::with_nodes(nodes),
    )
    .map_err(to_py)
}

#[pyfunction]
fn gaussian_marginal_loglik(params: &PyParameters, dataset: &PyDataset) -> PyResult<f64> {
    glmmd::gaussian_marginal_loglik(&params.inner, &dataset.inner).map_err(to_py)
}

#[pyclass(name = "FitResult", module = "pyglmmd")]
struct PyFitResult {
    inner: glmmd::FitResult,
    dataset: glmmd::Dataset,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn params(&self) -> PyParameters {
        PyParameters {
            inner: self.inner.params.clone(),
        }
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iters(&self) -> usize {
        self.inner.iters
    }

    /// Standard errors in the order `beta_A, beta_B, vech(Sigma), phi`.
    fn standard_errors(&self) -> Option<Vec<f64>> {
        self.inner
            .asym_cov
            .as_ref()
            .map(|c| glmmd::inference::standard_errors(c).iter().copied().collect())
    }

    /// Confidence-interval table as a list of dicts.
    #[pyo3(signature = (alpha = 0.05, sd_method = "endpoint"))]
    fn ci_table<'py>(
        &self,
        py: Python<'py>,
        alpha: f64,
        sd_method: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let method = match sd_method {
            "endpoint" => SdMethod::Endpoint,
            "delta" => SdMethod::Delta,
            other => return Err(PyValueError::new_err(format!("unknown sd_method {other}"))),
        };
        let table = ci_all(&self.inner, &self.dataset, alpha, method, &Labels::default())
            .map_err(to_py)?;
        table
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new_bound(py);
                d.set_item("parameter", &r.name)?;
                d.set_item("estimate", r.estimate)?;
                d.set_item("lower", r.lower)?;
                d.set_item("upper", r.upper)?;
                d.set_item("truncated", r.truncated)?;
                Ok(d)
            })
            .collect()
    }

    fn to_json(&self) -> String {
        glmmd::cli::fit_result_json(&self.inner, self.inner.options.seed).to_string()
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, family_name, nodes = 21, max_iters = 5000, restarts = 1, seed = 0))]
fn fit(
    py: Python<'_>,
    dataset: &PyDataset,
    family_name: &str,
    nodes: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> PyResult<PyFitResult> {
    let fam = family(family_name)?;
    let opts = FitOptions {
        max_iters,
        restarts,
        seed,
        quadrature: QuadratureSpec::with_nodes(nodes),
        ..FitOptions::default()
    };
    let ds = dataset.inner.clone();
    let inner = py
        .allow_threads(|| glmmd::fit_mle(&ds, fam, &opts))
        .map_err(to_py)?;
    Ok(PyFitResult { inner, dataset: ds })
}

/// Simulated dataset and its true parameter vector
/// `(beta0, beta_B..., sigma2, phi)`.
#[pyfunction]
#[pyo3(signature = (setting, m, n = None, seed = 1))]
fn simulate(setting: &str, m: usize, n: Option<usize>, seed: u64) -> PyResult<(PyDataset, Vec<f64>)> {
    let s: SimSetting = setting.parse().map_err(to_py)?;
    let sim = generate_dataset(&s, m, n.unwrap_or(m / 5), seed).map_err(to_py)?;
    Ok((PyDataset { inner: sim.dataset }, s.true_vector()))
}

/// Coverage study rows as dicts keyed by the CSV column names.
#[pyfunction]
#[pyo3(signature = (settings, m_grid, reps, alpha = 0.05, seed = 1))]
fn coverage<'py>(
    py: Python<'py>,
    settings: Vec<String>,
    m_grid: Vec<usize>,
    reps: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let settings: Vec<SimSetting> = settings
        .iter()
        .map(|s| s.parse())
        .collect::<glmmd::Result<_>>()
        .map_err(to_py)?;
    let report = py
        .allow_threads(|| {
            run_coverage(&settings, &m_grid, reps, alpha, seed, &FitOptions::default())
        })
        .map_err(to_py)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("setting", &r.setting)?;
            d.set_item("m", r.m)?;
            d.set_item("n", r.n)?;
            d.set_item("replications", r.replications)?;
            d.set_item("covered", r.covered)?;
            d.set_item("coverage", r.coverage)?;
            d.set_item("mc_se", r.mc_se)?;
            d.set_item("fit_failures", r.fit_failures)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn pyglmmd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParameters>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(trigamma, m)?)?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(dispersion_info, m)?)?;
    m.add_function(wrap_pyfunction!(log_density, m)?)?;
    m.add_function(wrap_pyfunction!(ci_phi, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_marginal_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    Ok(())
}
