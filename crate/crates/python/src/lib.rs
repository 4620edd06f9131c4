//! Python bindings. Matrices cross the boundary as nested lists, row-major.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mixmem::io::{load_dataset_csv, model_from_json, model_to_json, save_dataset_csv};
use mixmem::matching::{Matcher, Permutation};
use mixmem::moments::{block_tensor, negative_fraction as tensor_negative_fraction};
use mixmem::partition::{build_partition_plan, default_anchors, default_partition_count, fit_partitioned, IndexTriple};
use mixmem::pqp::{factorize_best_of, FactorizeOptions};
use mixmem::sim::{contaminate, rmse_aligned as core_rmse, sample_model, simulate_dataset, SimConfig};
use mixmem::{Error, FitOptions, ModelParams, Tensor3};

fn to_py(err: Error) -> PyErr {
    match err.category() {
        "solver" => PyRuntimeError::new_err(err.to_string()),
        "io" => PyOSError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Categorical observations: `n` rows of `p` category indices.
#[pyclass(name = "Dataset", module = "mixmem")]
pub struct PyDataset {
    inner: mixmem::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(categories: Vec<usize>, rows: Vec<Vec<u32>>) -> PyResult<Self> {
        let inner = mixmem::Dataset::from_rows(categories, &rows).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: load_dataset_csv(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset_csv(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn categories(&self) -> Vec<usize> {
        self.inner.categories().to_vec()
    }

    fn rows(&self) -> Vec<Vec<u32>> {
        (0..self.inner.n()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, p={})", self.inner.n(), self.inner.p())
    }
}

/// Per-variable `d_j × k` column-stochastic matrices plus the membership concentration.
#[pyclass(name = "Model", module = "mixmem")]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Give `alpha` for a full model or only `alpha0` for an estimate.
    #[new]
    #[pyo3(signature = (thetas, alpha=None, alpha0=None))]
    fn new(thetas: Vec<Vec<Vec<f64>>>, alpha: Option<Vec<f64>>, alpha0: Option<f64>) -> PyResult<Self> {
        let thetas = thetas.iter().map(|t| matrix_from_rows(t)).collect::<PyResult<Vec<_>>>()?;
        let inner = match alpha {
            Some(a) => ModelParams::new(thetas, DVector::from_vec(a)),
            None => ModelParams::from_thetas(thetas, alpha0),
        }
        .map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel { inner: model_from_json(text).map_err(to_py)?.params })
    }

    fn to_json(&self) -> String {
        model_to_json(&self.inner, None)
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn alpha(&self) -> Option<Vec<f64>> {
        self.inner.alpha().map(|a| a.iter().copied().collect())
    }

    #[getter]
    fn alpha0(&self) -> Option<f64> {
        self.inner.alpha0()
    }

    #[getter]
    fn thetas(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.thetas().iter().map(matrix_to_rows).collect()
    }

    fn __repr__(&self) -> String {
        format!("Model(p={}, k={})", self.inner.p(), self.inner.k())
    }
}

/// Outcome of [`fit`]: the stitched model and per-partition diagnostics.
#[pyclass(name = "FitResult", module = "mixmem", get_all)]
pub struct PyFitResult {
    model: Py<PyModel>,
    partitions: Vec<IndexTriple>,
    converged: Vec<bool>,
    iterations: Vec<usize>,
    objectives: Vec<f64>,
    permutations: Vec<Option<Vec<usize>>>,
    valid: Vec<bool>,
    weights: Vec<Vec<f64>>,
}

#[pymethods]
impl PyFitResult {
    fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Samples a model and `n` observations, then replaces a `delta` fraction of entries with noise.
#[pyfunction]
#[pyo3(signature = (p=25, k=3, d=4, alpha_h=0.1, n=1000, delta=0.0, seed=0))]
fn simulate(
    py: Python<'_>,
    p: usize,
    k: usize,
    d: usize,
    alpha_h: f64,
    n: usize,
    delta: f64,
    seed: u64,
) -> PyResult<(PyModel, PyDataset)> {
    let cfg = SimConfig { p, k, d, alpha_h, n, delta, seed, theta_prior: None };
    py.detach(|| {
        let truth = sample_model(&cfg)?;
        let data = contaminate(&simulate_dataset(&truth, &cfg)?, delta, seed)?;
        Ok((PyModel { inner: truth }, PyDataset { inner: data }))
    })
    .map_err(to_py)
}

fn factorize_options(max_iters: usize, rel_tol: f64, epsilon: f64, seed: u64) -> PyResult<FactorizeOptions> {
    let opts = FactorizeOptions { max_iters, rel_tol, epsilon, seed };
    opts.validate().map_err(to_py)?;
    Ok(opts)
}

/// Fits a `k`-component model by partitioned third-order moment factorization.
#[pyfunction]
#[pyo3(signature = (
    data, k, alpha0, partitions=None, anchors=None, seed=0, max_iters=500, rel_tol=1e-6,
    epsilon=1e-10, restarts=3, matcher="procrustes", workers=None
))]
fn fit(
    py: Python<'_>,
    data: &PyDataset,
    k: usize,
    alpha0: f64,
    partitions: Option<usize>,
    anchors: Option<IndexTriple>,
    seed: u64,
    max_iters: usize,
    rel_tol: f64,
    epsilon: f64,
    restarts: usize,
    matcher: &str,
    workers: Option<usize>,
) -> PyResult<PyFitResult> {
    let opts = FitOptions {
        factorize: factorize_options(max_iters, rel_tol, epsilon, seed)?,
        restarts,
        matcher: matcher.parse::<Matcher>().map_err(to_py)?,
        workers,
    };
    let data = &data.inner;
    let (plan, result) = py
        .detach(|| {
            let anchors = match anchors {
                Some(a) => a,
                None => default_anchors(data.p(), k, data.categories())?,
            };
            let r = partitions.unwrap_or_else(|| default_partition_count(data.p(), k, data.categories(), &anchors));
            let plan = build_partition_plan(data.p(), k, data.categories(), Some(anchors), r, seed)?;
            let result = fit_partitioned(data, k, alpha0, &plan, &opts)?;
            Ok((plan, result))
        })
        .map_err(to_py)?;
    Ok(PyFitResult {
        model: Py::new(py, PyModel { inner: result.params })?,
        partitions: plan.partitions().to_vec(),
        converged: result.converged,
        iterations: result.iterations,
        objectives: result.objectives,
        permutations: result.reports.iter().map(|r| r.permutation.as_ref().map(|p| p.as_slice().to_vec())).collect(),
        valid: result.reports.iter().map(|r| r.valid).collect(),
        weights: result.weights.iter().map(|w| w.iter().copied().collect()).collect(),
    })
}

/// RMSE between `estimate` and `truth` after aligning components.
#[pyfunction]
fn rmse(estimate: &PyModel, truth: &PyModel) -> PyResult<f64> {
    core_rmse(&estimate.inner, &truth.inner).map_err(to_py)
}

/// Fraction of negative entries in the empirical block tensor over `block`'s three variable sets.
#[pyfunction]
fn negative_fraction(data: &PyDataset, alpha0: f64, block: IndexTriple) -> PyResult<f64> {
    let t = block_tensor(&data.inner, &block[0], &block[1], &block[2], alpha0).map_err(to_py)?;
    Ok(tensor_negative_fraction(&t))
}

/// Nonnegative rank-`k` CP fit of a `d1 × d2 × d3` nested list. Returns a dict with factors
/// `a`, `b`, `c` (column sums 1), `weights`, `objective` and `converged`.
#[pyfunction]
#[pyo3(signature = (tensor, k, seed=0, max_iters=500, rel_tol=1e-6, epsilon=1e-10, restarts=1))]
fn factorize<'py>(
    py: Python<'py>,
    tensor: Vec<Vec<Vec<f64>>>,
    k: usize,
    seed: u64,
    max_iters: usize,
    rel_tol: f64,
    epsilon: f64,
    restarts: usize,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let d1 = tensor.len();
    let d2 = tensor.first().map_or(0, Vec::len);
    let d3 = tensor.first().and_then(|s| s.first()).map_or(0, Vec::len);
    if tensor.iter().any(|s| s.len() != d2 || s.iter().any(|f| f.len() != d3)) {
        return Err(PyValueError::new_err("tensor is ragged"));
    }
    let t = Tensor3::from_fn([d1, d2, d3], |i, j, l| tensor[i][j][l]);
    let opts = factorize_options(max_iters, rel_tol, epsilon, seed)?;
    let fit = py.detach(|| factorize_best_of(&t, k, &opts, restarts)).map_err(to_py)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("a", matrix_to_rows(&fit.factors.a))?;
    out.set_item("b", matrix_to_rows(&fit.factors.b))?;
    out.set_item("c", matrix_to_rows(&fit.factors.c))?;
    out.set_item("weights", fit.factors.weights.iter().copied().collect::<Vec<_>>())?;
    out.set_item("objective", fit.objective)?;
    out.set_item("converged", fit.converged)?;
    Ok(out)
}

/// Column permutation `psi` aligning `new` to `reference` (`new[:, psi[s]]` matches
/// `reference[:, s]`), or `None` when the matcher cannot decide.
#[pyfunction]
#[pyo3(signature = (reference, new, matcher="procrustes"))]
fn match_columns(reference: Vec<Vec<f64>>, new: Vec<Vec<f64>>, matcher: &str) -> PyResult<Option<Vec<usize>>> {
    let reference = matrix_from_rows(&reference)?;
    let new = matrix_from_rows(&new)?;
    let matcher: Matcher = matcher.parse().map_err(to_py)?;
    let report = matcher
        .run(&reference, &Permutation::identity(reference.ncols()), &new)
        .map_err(to_py)?;
    Ok(report.permutation.map(|p| p.as_slice().to_vec()))
}

#[pymodule]
#[pyo3(name = "mixmem")]
fn mixmem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(negative_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(factorize, m)?)?;
    m.add_function(wrap_pyfunction!(match_columns, m)?)?;
    Ok(())
}
