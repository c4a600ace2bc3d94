//! Python bindings: models, extinction vectors, criteria, scans and Monte Carlo.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stripbp::config::ModelConfig;
use stripbp::criteria;
use stripbp::extinction::{self, ExtinctionVector, DEFAULT_REPORT_LEVELS, DEFAULT_TOL};
use stripbp::fixedpoints::{s0_scan_marked, ExtinctionMarks};
use stripbp::model::{self, PhaseSet, TypeId};
use stripbp::moments::step_up_sequence;
use stripbp::montecarlo::{estimate_q, TrialConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py_dict<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A block lower Hessenberg branching process.
#[pyclass(name = "Model", frozen)]
#[derive(Clone)]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (a=0.2, b=0.0, c=1.0, y=0.2, x=1.5))]
    fn example1(a: f64, b: f64, c: f64, y: f64, x: f64) -> PyResult<Self> {
        let inner = model::build_example1(a, b, c, y, x).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (a=0.2, b=0.05, c=1.0))]
    fn example2(a: f64, b: f64, c: f64) -> PyResult<Self> {
        let inner = model::build_example2(a, b, c).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (a=0.2, b=0.0, c=1.0))]
    fn chain(a: f64, b: f64, c: f64) -> PyResult<Self> {
        let inner = model::build_chain(a, b, c).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Builds a model from the JSON configuration format used by the CLI.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ModelConfig::from_json(text)
            .and_then(|c| c.build())
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let dict = PyDict::new(py);
        for (k, v) in self.inner.params() {
            dict.set_item(k, v)?;
        }
        Ok(dict)
    }

    fn with_param(&self, name: &str, value: f64) -> PyResult<Self> {
        let inner = self.inner.with_param(name, value).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Mean block from level `k` to level `l` as nested lists.
    fn mean_block(&self, k: usize, l: usize) -> Vec<Vec<f64>> {
        rows(&self.inner.mean_block(k, l))
    }

    /// Step-up matrix at level `k`, or `None` past the first non-finite block.
    fn step_up(&self, k: usize) -> Option<Vec<Vec<f64>>> {
        step_up_sequence(&self.inner, k, None).block(k).map(rows)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(name={:?}, d={}, params={:?})",
            self.inner.name(),
            self.inner.d(),
            self.inner.params()
        )
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// An extinction probability vector on levels `0..=levels`.
#[pyclass(name = "ExtinctionVector", frozen)]
struct PyExtinctionVector {
    inner: ExtinctionVector,
}

#[pymethods]
impl PyExtinctionVector {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.head(self.inner.levels).to_vec()
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn get(&self, level: usize, phase: usize) -> PyResult<f64> {
        if phase == 0 || phase > self.inner.d || level > self.inner.levels {
            return Err(value_err(format!("<{level},{phase}> is not reported")));
        }
        Ok(self.inner.get(TypeId::new(level, phase)))
    }

    fn root(&self) -> f64 {
        self.inner.root()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExtinctionVector(root={}, levels={})",
            self.inner.root(),
            self.inner.levels
        )
    }
}

fn phase_set(m: &PyModel, phases: Vec<usize>) -> PyResult<PhaseSet> {
    PhaseSet::new(m.inner.d(), phases, [], []).map_err(value_err)
}

fn wrap(r: Result<ExtinctionVector, extinction::ExtinctionError>) -> PyResult<PyExtinctionVector> {
    r.map(|inner| PyExtinctionVector { inner })
        .map_err(runtime_err)
}

#[pyfunction]
#[pyo3(signature = (model, tol=DEFAULT_TOL, report=DEFAULT_REPORT_LEVELS))]
fn q_global(
    py: Python<'_>,
    model: &PyModel,
    tol: f64,
    report: usize,
) -> PyResult<PyExtinctionVector> {
    py.allow_threads(|| wrap(extinction::q_global(&model.inner, tol, report)))
}

#[pyfunction]
#[pyo3(signature = (model, tol=DEFAULT_TOL, report=DEFAULT_REPORT_LEVELS))]
fn q_partial(
    py: Python<'_>,
    model: &PyModel,
    tol: f64,
    report: usize,
) -> PyResult<PyExtinctionVector> {
    py.allow_threads(|| wrap(extinction::q_partial(&model.inner, tol, report)))
}

/// Extinction probability in the union of the given phases.
#[pyfunction]
#[pyo3(signature = (model, phases, tol=DEFAULT_TOL, report=DEFAULT_REPORT_LEVELS))]
fn q_of_a(
    py: Python<'_>,
    model: &PyModel,
    phases: Vec<usize>,
    tol: f64,
    report: usize,
) -> PyResult<PyExtinctionVector> {
    let set = phase_set(model, phases)?;
    py.allow_threads(|| wrap(extinction::q_of_a(&model.inner, &set, tol, report)))
}

#[pyfunction]
#[pyo3(signature = (model, levels=400))]
fn partial_criterion<'py>(
    py: Python<'py>,
    model: &PyModel,
    levels: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = criteria::partial_extinction_criterion(&model.inner, levels).map_err(runtime_err)?;
    to_py_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (model, levels=400))]
fn global_criterion<'py>(
    py: Python<'py>,
    model: &PyModel,
    levels: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = criteria::global_extinction_criterion(&model.inner, levels).map_err(runtime_err)?;
    to_py_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (model, phases, levels=200))]
fn sufficient_conditions<'py>(
    py: Python<'py>,
    model: &PyModel,
    phases: Vec<usize>,
    levels: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let set = phase_set(model, phases)?;
    let r = criteria::theorem_4_6_check(&model.inner, &set, levels).map_err(runtime_err)?;
    to_py_dict(py, &r)
}

/// Level-0 scan of the fixed-point set with the extinction vectors marked.
#[pyfunction]
#[pyo3(signature = (model, h=1.0/256.0, depth=400))]
fn s0_scan<'py>(
    py: Python<'py>,
    model: &PyModel,
    h: f64,
    depth: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let grid = py.allow_threads(|| {
        let marks = ExtinctionMarks::compute(&model.inner, DEFAULT_TOL, DEFAULT_REPORT_LEVELS)?;
        s0_scan_marked(&model.inner, h, depth, &marks)
    });
    let grid = grid.map_err(runtime_err)?;
    let out = serde_json::json!({
        "h": grid.h,
        "n": grid.n,
        "area": grid.area(),
        "marked": grid.marked,
    });
    to_py_dict(py, &out)
}

/// Monte Carlo estimate of extinction in the given phases.
#[pyfunction]
#[pyo3(signature = (model, phases, trials=10_000, seed=0))]
fn simulate<'py>(
    py: Python<'py>,
    model: &PyModel,
    phases: Vec<usize>,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let set = phase_set(model, phases)?;
    let cfg = TrialConfig {
        seed,
        ..TrialConfig::default()
    };
    let est = py
        .allow_threads(|| estimate_q(&model.inner, &set, &cfg, trials))
        .map_err(runtime_err)?;
    to_py_dict(py, &est)
}

#[pymodule]
fn stripbp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyExtinctionVector>()?;
    m.add_function(wrap_pyfunction!(q_global, m)?)?;
    m.add_function(wrap_pyfunction!(q_partial, m)?)?;
    m.add_function(wrap_pyfunction!(q_of_a, m)?)?;
    m.add_function(wrap_pyfunction!(partial_criterion, m)?)?;
    m.add_function(wrap_pyfunction!(global_criterion, m)?)?;
    m.add_function(wrap_pyfunction!(sufficient_conditions, m)?)?;
    m.add_function(wrap_pyfunction!(s0_scan, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
