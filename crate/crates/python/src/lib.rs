//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wcord::buffer::{MemoryBuffer, Side};
use wcord::cli::{load_data, obtain_teacher, run_distill, RunConfig};
use wcord::critic::{mi_bound_discrete, power_iteration};
use wcord::engine::{self, Objective};
use wcord::nets::{MlpSpec, Model};
use wcord::ot::{self, CostMatrix, CostMetric, Epsilon, SinkhornConfig};
use wcord::{Error, Tape, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Divergence { .. } | Error::SolverUnderflow(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(Tensor::matrix(rows.len(), cols, rows.concat()))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Cosine cost `1 - cos(t_i, s_j)` between two feature sets.
#[pyfunction]
fn cosine_cost(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let c = ot::cosine_cost(&matrix(&teacher)?, &matrix(&student)?).map_err(to_py)?;
    Ok(rows(c.values()))
}

/// Entropic transport plan and its cost. `epsilon` is relative to the mean
/// cost unless `absolute` is set.
#[pyfunction]
#[pyo3(signature = (cost, epsilon=0.01, absolute=false, outer=50, inner=25, tol=1e-6, mu=None, nu=None))]
#[allow(clippy::too_many_arguments)]
fn solve_transport<'py>(
    py: Python<'py>,
    cost: Vec<Vec<f64>>,
    epsilon: f64,
    absolute: bool,
    outer: usize,
    inner: usize,
    tol: f64,
    mu: Option<Vec<f64>>,
    nu: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = CostMatrix::new(matrix(&cost)?, CostMetric::Given).map_err(to_py)?;
    let eps = if absolute { Epsilon::Absolute(epsilon) } else { Epsilon::RelativeToMeanCost(epsilon) };
    let cfg = SinkhornConfig { epsilon: eps, outer_iters: outer, inner_iters: inner, marginal_tol: tol };
    let mu = mu.unwrap_or_else(|| ot::uniform(c.rows()));
    let nu = nu.unwrap_or_else(|| ot::uniform(c.cols()));
    let (plan, w) = ot::solve_transport(&c, &mu, &nu, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("w", w)?;
    d.set_item("plan", rows(&plan.pi))?;
    d.set_item("epsilon", plan.epsilon)?;
    d.set_item("row_residual", plan.row_residual)?;
    d.set_item("col_residual", plan.col_residual)?;
    d.set_item("outer_iters", plan.outer_iters_used)?;
    d.set_item("converged", plan.converged)?;
    Ok(d)
}

/// Exact uniform-marginal assignment cost by enumeration (n <= 9).
#[pyfunction]
fn exact_assignment_cost(cost: Vec<Vec<f64>>) -> PyResult<f64> {
    let c = CostMatrix::new(matrix(&cost)?, CostMetric::Given).map_err(to_py)?;
    ot::exact_assignment_cost(&c).map_err(to_py)
}

/// `(sigma_hat, u, v)` after `iters` power-iteration steps.
#[pyfunction]
#[pyo3(signature = (w, iters=50))]
fn largest_singular_value(w: Vec<Vec<f64>>, iters: usize) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let w = matrix(&w)?;
    let u0 = vec![1.0 / (w.rows() as f64).sqrt(); w.rows()];
    let est = power_iteration(&w, &u0, iters).map_err(to_py)?;
    Ok((est.sigma, est.u, est.v))
}

/// `(bound, exact_mi)` for a discrete joint probability table.
#[pyfunction]
fn mi_bound(joint: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let b = mi_bound_discrete(&matrix(&joint)?).map_err(to_py)?;
    Ok((b.bound, b.exact_mi))
}

#[pyfunction]
fn ce_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let tape = Tape::new();
    let z = tape.constant(matrix(&logits)?);
    Ok(engine::ce_loss(z, &labels).map_err(to_py)?.value().item())
}

#[pyfunction]
#[pyo3(signature = (student_logits, teacher_logits, labels, alpha=1.0, rho=4.0))]
fn kd_loss(student_logits: Vec<Vec<f64>>, teacher_logits: Vec<Vec<f64>>, labels: Vec<usize>, alpha: f64, rho: f64) -> PyResult<f64> {
    if !(rho > 0.0) {
        return Err(PyValueError::new_err("rho must be positive"));
    }
    let tape = Tape::new();
    let zs = tape.constant(matrix(&student_logits)?);
    let zt = matrix(&teacher_logits)?;
    Ok(engine::kd_loss(zs, &zt, &labels, alpha, rho).map_err(to_py)?.value().item())
}

/// `(features, labels)` for a Gaussian-cluster dataset.
#[pyfunction]
fn gen_clusters(k: usize, n_per: usize, dim: usize, spread: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = wcord::data::gen_clusters(k, n_per, dim, spread, seed).map_err(to_py)?;
    Ok((rows(&ds.x), ds.y))
}

/// A multilayer perceptron; the penultimate layer is the embedding.
#[pyclass(name = "Model", module = "wcord_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (widths, seed=0))]
    fn new(widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        let spec = MlpSpec::new(widths).map_err(to_py)?;
        Ok(PyModel { inner: Model::init(spec, seed) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: Model::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.spec().widths().to_vec()
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// `(embeddings, logits)`.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (h, z) = self.inner.forward(&matrix(&x)?).map_err(to_py)?;
        Ok((rows(&h), rows(&z)))
    }

    fn accuracy(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<f64> {
        let (_, z) = self.inner.forward(&matrix(&x)?).map_err(to_py)?;
        if y.len() != z.rows() {
            return Err(PyValueError::new_err("label count does not match rows"));
        }
        Ok(engine::accuracy(&z, &y))
    }

    fn __repr__(&self) -> String {
        format!("Model(widths={:?}, frozen={})", self.inner.spec().widths(), self.inner.is_frozen())
    }
}

/// Feature cache keyed by sample id, used to draw incongruent pairs.
#[pyclass(name = "MemoryBuffer", module = "wcord_py")]
struct PyMemoryBuffer {
    inner: MemoryBuffer,
}

fn side(name: &str) -> PyResult<Side> {
    match name {
        "teacher" => Ok(Side::Teacher),
        "student" => Ok(Side::Student),
        _ => Err(PyValueError::new_err(format!("side must be 'teacher' or 'student', got {name:?}"))),
    }
}

#[pymethods]
impl PyMemoryBuffer {
    #[new]
    #[pyo3(signature = (dim, capacity, seed=0))]
    fn new(dim: usize, capacity: usize, seed: u64) -> PyResult<Self> {
        Ok(PyMemoryBuffer { inner: MemoryBuffer::new(dim, capacity, seed).map_err(to_py)? })
    }

    fn upsert(&mut self, id: u64, teacher: Vec<f64>, student: Vec<f64>) -> PyResult<()> {
        self.inner.upsert(id, &teacher, &student).map_err(to_py)
    }

    #[pyo3(signature = (id, side_name="teacher"))]
    fn get(&self, id: u64, side_name: &str) -> PyResult<Option<Vec<f64>>> {
        Ok(self.inner.get(id, side(side_name)?).map(<[f64]>::to_vec))
    }

    /// `m` `(id, feature)` pairs with ids other than `anchor`.
    #[pyo3(signature = (anchor, m, side_name="teacher"))]
    fn sample_negatives(&mut self, anchor: u64, m: usize, side_name: &str) -> PyResult<Vec<(u64, Vec<f64>)>> {
        self.inner.sample_negatives(anchor, m, side(side_name)?).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// The defaulted run config as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Runs teacher training (or loading) and distillation from a JSON config.
/// Returns `(summary, student, teacher)`; nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None))]
fn distill<'py>(py: Python<'py>, config_json: &str, seed: Option<u64>) -> PyResult<(Bound<'py, PyAny>, PyModel, PyModel)> {
    let cfg = RunConfig::from_json(config_json).and_then(|c| c.resolve(seed)).map_err(to_py)?;
    let data = load_data(&cfg).map_err(to_py)?;
    let (teacher, _) = obtain_teacher(&cfg, &data).map_err(to_py)?;
    let run = run_distill(&cfg, &data, &teacher).map_err(to_py)?;
    let json = serde_json::to_string(&run.summary).expect("summary serializes");
    let summary = py.import("json")?.call_method1("loads", (json,))?;
    Ok((summary, PyModel { inner: run.student }, PyModel { inner: teacher }))
}

/// Names accepted by the `objective` config key.
#[pyfunction]
fn objectives() -> Vec<&'static str> {
    Objective::ALL.iter().map(|o| o.name()).collect()
}

#[pymodule]
fn wcord_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyMemoryBuffer>()?;
    m.add_function(wrap_pyfunction!(cosine_cost, m)?)?;
    m.add_function(wrap_pyfunction!(solve_transport, m)?)?;
    m.add_function(wrap_pyfunction!(exact_assignment_cost, m)?)?;
    m.add_function(wrap_pyfunction!(largest_singular_value, m)?)?;
    m.add_function(wrap_pyfunction!(mi_bound, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gen_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(objectives, m)?)?;
    Ok(())
}
