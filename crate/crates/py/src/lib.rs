//! Python bindings. Teachers and students are wrapped classes; reports come
//! back as plain dicts through their JSON form.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use recover_core::certificate::{default_ell_t, test_statistic};
use recover_core::gauss;
use recover_core::geometry::{self, McSettings};
use recover_core::harness::{self, ExperimentConfig};
use recover_core::hermite;
use recover_core::network::{self, TeacherSpec};
use recover_core::objective;
use recover_core::train;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(module = "recover", from_py_object)]
#[derive(Clone)]
struct Teacher {
    inner: network::Teacher,
}

#[pymethods]
impl Teacher {
    /// Teacher from signed weights and directions (rows are normalized).
    #[new]
    fn new(a: Vec<f64>, w: Vec<Vec<f64>>) -> PyResult<Self> {
        network::Teacher::from_parts(a, w).map(|inner| Teacher { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Teacher { inner }).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.a.clone()
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        self.inner.w.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn delta_sep(&self) -> f64 {
        self.inner.delta_sep
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa
    }

    /// Centered target `f*(x) - alpha* - beta* . x`.
    fn target(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(value_err(format!("expected {} inputs, got {}", self.inner.dim(), x.len())));
        }
        Ok(self.inner.target(&x))
    }

    fn __repr__(&self) -> String {
        format!("Teacher(d={}, m_star={})", self.inner.dim(), self.inner.width())
    }
}

#[pyclass(module = "recover", from_py_object)]
#[derive(Clone)]
struct Student {
    inner: network::Student,
}

#[pymethods]
impl Student {
    #[new]
    #[pyo3(signature = (a, w, alpha = 0.0, beta = None))]
    fn new(a: Vec<f64>, w: Vec<Vec<f64>>, alpha: f64, beta: Option<Vec<f64>>) -> PyResult<Self> {
        let d = w.first().map_or(0, Vec::len);
        let inner = network::Student {
            a,
            w,
            alpha,
            beta: beta.unwrap_or_else(|| vec![0.0; d]),
        };
        inner.validate().map_err(value_err)?;
        Ok(Student { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: network::Student = serde_json::from_str(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Student { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.a.clone()
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        self.inner.w.clone()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn masses(&self) -> Vec<f64> {
        self.inner.masses()
    }

    fn param_norm_sq(&self) -> f64 {
        self.inner.param_norm_sq()
    }

    fn __repr__(&self) -> String {
        format!("Student(d={}, m={})", self.inner.dim(), self.inner.width())
    }
}

fn checked(student: &Student, teacher: &Teacher) -> PyResult<()> {
    student.inner.check_against(&teacher.inner).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (d, a, r = 2, delta_min = 0.4, seed = 0))]
fn sample_teacher(d: usize, a: Vec<f64>, r: usize, delta_min: f64, seed: u64) -> PyResult<Teacher> {
    let spec = TeacherSpec {
        d,
        r,
        m_star: a.len(),
        delta_min,
        a_magnitudes: a,
        kappa_floor: None,
    };
    network::sample_teacher(&spec, seed).map(|inner| Teacher { inner }).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (m, d, seed = 0))]
fn init_student(m: usize, d: usize, seed: u64) -> PyResult<Student> {
    network::init_student(m, d, seed).map(|inner| Student { inner }).map_err(value_err)
}

#[pyfunction]
fn population_square_loss(student: &Student, teacher: &Teacher) -> PyResult<f64> {
    checked(student, teacher)?;
    Ok(objective::population_square_loss(&student.inner, &teacher.inner))
}

#[pyfunction]
fn regularized_loss(student: &Student, teacher: &Teacher, lam: f64) -> PyResult<f64> {
    checked(student, teacher)?;
    Ok(objective::regularized_loss(&student.inner, &teacher.inner, lam))
}

/// Gradient of the regularized loss as a dict with keys g_a, g_W, g_alpha, g_beta.
#[pyfunction]
fn population_gradient<'py>(py: Python<'py>, student: &Student, teacher: &Teacher, lam: f64) -> PyResult<Bound<'py, PyAny>> {
    checked(student, teacher)?;
    to_py(py, &objective::population_gradient(&student.inner, &teacher.inner, lam))
}

#[pyfunction]
fn loss_decomposition<'py>(py: Python<'py>, student: &Student, teacher: &Teacher) -> PyResult<Bound<'py, PyAny>> {
    checked(student, teacher)?;
    to_py(py, &objective::loss_decomposition(&student.inner, &teacher.inner))
}

#[pyfunction]
fn relu_pair_kernel(w: Vec<f64>, u: Vec<f64>) -> PyResult<f64> {
    if w.len() != u.len() {
        return Err(value_err("vectors differ in length"));
    }
    Ok(gauss::relu_pair_kernel(&w, &u))
}

#[pyfunction]
fn sigma_ge2_kernel(wbar: Vec<f64>, ubar: Vec<f64>) -> PyResult<f64> {
    gauss::sigma_ge2_kernel(&wbar, &ubar).map_err(value_err)
}

/// Hermite coefficients of "relu" or "abs" up to order `k_max`.
#[pyfunction]
#[pyo3(signature = (activation = "relu", k_max = 64))]
fn hermite_coefficients(activation: &str, k_max: usize) -> PyResult<Vec<f64>> {
    hermite::build_table_tagged(activation, k_max).map(|t| t.coeffs).map_err(value_err)
}

#[pyfunction]
fn hermite_normalized(k: usize, x: f64) -> f64 {
    hermite::hermite_normalized(k, x)
}

#[pyfunction]
fn stage1_one_step(student: &Student, teacher: &Teacher) -> PyResult<Student> {
    checked(student, teacher)?;
    Ok(Student {
        inner: train::stage1_one_step(&student.inner, &teacher.inner, 1.0, 1.0),
    })
}

#[pyfunction]
fn balance_norms(student: &Student) -> Student {
    Student {
        inner: train::balance_norms(&student.inner),
    }
}

#[pyfunction]
fn partition<'py>(py: Python<'py>, student: &Student, teacher: &Teacher) -> PyResult<Bound<'py, PyAny>> {
    checked(student, teacher)?;
    to_py(py, &geometry::partition(&student.inner, &teacher.inner))
}

/// Geometry diagnostics; Monte Carlo residual norms when `mc_n > 0`.
#[pyfunction]
#[pyo3(signature = (student, teacher, lam, mc_n = 0, seed = 0))]
fn diagnose<'py>(
    py: Python<'py>,
    student: &Student,
    teacher: &Teacher,
    lam: f64,
    mc_n: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    checked(student, teacher)?;
    let mc = (mc_n > 0).then_some(McSettings { n: mc_n, seed });
    to_py(py, &geometry::diagnose(&student.inner, &teacher.inner, lam, None, mc, 1.0))
}

#[pyfunction]
#[pyo3(signature = (teacher, ell = None, k_max = None, grid_n = 720, ambient = 1000, seed = 0))]
fn certify<'py>(
    py: Python<'py>,
    teacher: &Teacher,
    ell: Option<usize>,
    k_max: Option<usize>,
    grid_n: usize,
    ambient: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = harness::certify(&teacher.inner, ell, k_max, grid_n, ambient, seed).map_err(value_err)?;
    to_py(py, &report)
}

/// Test statistic for teacher `i` at the default order.
#[pyfunction]
fn test_statistic_default(student: &Student, teacher: &Teacher, i: usize) -> PyResult<f64> {
    checked(student, teacher)?;
    if i >= teacher.inner.width() {
        return Err(value_err(format!("teacher index {i} out of range")));
    }
    let ell_t = default_ell_t(&teacher.inner, i);
    test_statistic(&student.inner, &teacher.inner, i, ell_t, &hermite::relu_table()).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (n = 100_000, seed = 0, instances = 5, d = 8))]
fn mc_check<'py>(py: Python<'py>, n: usize, seed: u64, instances: usize, d: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &harness::mc_check(n, seed, instances, d))
}

/// Runs a full experiment from a JSON config and returns its summary.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    let outcome = py
        .detach(|| harness::run_experiment(&cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &outcome.summary)
}

#[pymodule]
fn recover(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Teacher>()?;
    m.add_class::<Student>()?;
    m.add_function(wrap_pyfunction!(sample_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(init_student, m)?)?;
    m.add_function(wrap_pyfunction!(population_square_loss, m)?)?;
    m.add_function(wrap_pyfunction!(regularized_loss, m)?)?;
    m.add_function(wrap_pyfunction!(population_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(loss_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(relu_pair_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_ge2_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(hermite_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(hermite_normalized, m)?)?;
    m.add_function(wrap_pyfunction!(stage1_one_step, m)?)?;
    m.add_function(wrap_pyfunction!(balance_norms, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(test_statistic_default, m)?)?;
    m.add_function(wrap_pyfunction!(mc_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
