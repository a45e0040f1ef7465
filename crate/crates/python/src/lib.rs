//! Python bindings: subspaces, robust solves, identification and the
//! closed-loop harness. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use georls::behavior::{self, Trajectory};
use georls::control::{self, ControlConfig};
use georls::manifold;
use georls::oracle::{self, VerifyOptions};
use georls::solver::{self, build_a, find_lambda};
use georls::{io, Error};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(georls_py, NumericalError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::DimensionMismatch(_)
        | Error::InvalidParameter(_)
        | Error::InvalidStepSize { .. }
        | Error::HorizonTooShort { .. }
        | Error::Parse(_) => PyValueError::new_err(e.to_string()),
        Error::Io(io) => io.into(),
        other => NumericalError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Orthonormal `n × k` basis representing a point of Gr(k, n).
#[pyclass(name = "StiefelPoint", module = "georls_py", frozen)]
struct PyStiefelPoint(manifold::StiefelPoint);

#[pymethods]
impl PyStiefelPoint {
    /// Validates orthonormality of the given rows.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        manifold::StiefelPoint::new(matrix_from_rows(&rows)?)
            .map(Self)
            .map_err(to_py)
    }

    /// `[I_k; 0]`.
    #[staticmethod]
    fn coordinate(n: usize, k: usize) -> PyResult<Self> {
        manifold::StiefelPoint::coordinate(n, k).map(Self).map_err(to_py)
    }

    /// Haar-distributed subspace.
    #[staticmethod]
    #[pyo3(signature = (n, k, seed = 0))]
    fn random(n: usize, k: usize, seed: u64) -> PyResult<Self> {
        if k == 0 || k > n {
            return Err(PyValueError::new_err(format!("need 0 < k <= n, got k={k}, n={n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self(manifold::StiefelPoint::random(n, k, &mut rng)))
    }

    /// Basis as a list of `n` rows.
    fn basis(&self) -> Vec<Vec<f64>> {
        rows_of(self.0.basis())
    }

    #[getter]
    fn n_amb(&self) -> usize {
        self.0.n_amb()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    fn distance(&self, other: &PyStiefelPoint) -> PyResult<f64> {
        manifold::chordal_distance(&self.0, &other.0).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("StiefelPoint(n_amb={}, k={})", self.0.n_amb(), self.0.k())
    }
}

/// Chordal distance `‖sin Θ‖_F` between two subspaces.
#[pyfunction]
fn chordal_distance(a: &PyStiefelPoint, b: &PyStiefelPoint) -> PyResult<f64> {
    manifold::chordal_distance(&a.0, &b.0).map_err(to_py)
}

/// Robust least squares over the chordal ball of radius `rho` around `center`.
#[pyclass(name = "Problem", module = "georls_py", frozen)]
struct PyProblem(solver::RobustLsqProblem);

#[pymethods]
impl PyProblem {
    /// `selector_rows` lists the coordinates weighted by `gamma`; `None` means all.
    #[new]
    #[pyo3(signature = (center, rho, b, selector_rows = None, gamma = 0.0, mu = 0.0))]
    fn new(
        center: &PyStiefelPoint,
        rho: f64,
        b: Vec<f64>,
        selector_rows: Option<Vec<usize>>,
        gamma: f64,
        mu: f64,
    ) -> PyResult<Self> {
        let n = center.0.n_amb();
        let selector = match selector_rows {
            Some(rows) => solver::Selector::new(n, rows),
            None => solver::Selector::leading(n, n),
        }
        .map_err(to_py)?;
        let ball = manifold::SubspaceBall::new(center.0.clone(), rho).map_err(to_py)?;
        solver::RobustLsqProblem::new(ball, DVector::from_vec(b), selector, gamma, mu)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn n_amb(&self) -> usize {
        self.0.n_amb()
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.0.ball().radius()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma()
    }

    /// Worst-case subspace at `x`: `(Y*, lambda*, value, boundary)`.
    fn inner_max(&self, x: Vec<f64>) -> PyResult<(PyStiefelPoint, f64, f64, bool)> {
        if x.len() != self.0.n_amb() {
            return Err(PyValueError::new_err(format!(
                "x has {} entries, expected {}",
                x.len(),
                self.0.n_amb()
            )));
        }
        let x = DVector::from_vec(x);
        let a = build_a(&x, &self.0);
        let inner = find_lambda(&x, &a, &self.0, &solver::SolverOptions::default()).map_err(to_py)?;
        Ok((
            PyStiefelPoint(inner.y_star),
            inner.lambda_star,
            inner.value,
            inner.boundary,
        ))
    }

    /// Runs projected gradient descent on the robust objective.
    #[pyo3(signature = (alpha = 0.1, tolx = 1e-6, max_iter = 10_000, x0 = None))]
    fn solve(
        &self,
        py: Python<'_>,
        alpha: f64,
        tolx: f64,
        max_iter: usize,
        x0: Option<Vec<f64>>,
    ) -> PyResult<PySolution> {
        let opts = solver::SolverOptions {
            alpha,
            tolx,
            max_iter,
            x0: x0.map(DVector::from_vec),
            ..Default::default()
        };
        let res = py.detach(|| solver::solve(&self.0, &opts)).map_err(to_py)?;
        Ok(PySolution(res))
    }
}

#[pyclass(name = "Solution", module = "georls_py", frozen)]
struct PySolution(solver::SolverResult);

#[pymethods]
impl PySolution {
    #[getter]
    fn x_star(&self) -> Vec<f64> {
        self.0.x_star.as_slice().to_vec()
    }

    /// Worst-case projection of `x*`.
    #[getter]
    fn w_star(&self) -> Vec<f64> {
        self.0.w_star.as_slice().to_vec()
    }

    #[getter]
    fn y_star(&self) -> PyStiefelPoint {
        PyStiefelPoint(self.0.inner.y_star.clone())
    }

    #[getter]
    fn lambda_star(&self) -> f64 {
        self.0.inner.lambda_star
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.0.inner.distance
    }

    #[getter]
    fn boundary(&self) -> bool {
        self.0.inner.boundary
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn cost_trace(&self) -> Vec<f64> {
        self.0.cost_trace.clone()
    }

    #[getter]
    fn gradnorm_trace(&self) -> Vec<f64> {
        self.0.gradnorm_trace.clone()
    }

    #[getter]
    fn lambda_trace(&self) -> Vec<f64> {
        self.0.lambda_trace.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(iterations={}, converged={}, lambda_star={:e}, distance={})",
            self.0.iterations,
            if self.0.converged { "True" } else { "False" },
            self.0.inner.lambda_star,
            self.0.inner.distance
        )
    }
}

/// Identified restricted behavior.
#[pyclass(name = "BehaviorEstimate", module = "georls_py", frozen)]
struct PyBehaviorEstimate(behavior::BehaviorEstimate);

#[pymethods]
impl PyBehaviorEstimate {
    #[getter]
    fn subspace(&self) -> PyStiefelPoint {
        PyStiefelPoint(self.0.subspace.clone())
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.0.singular_values.clone()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_estimate(&path, &self.0).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_estimate(&path).map(Self).map_err(to_py)
    }
}

/// Identifies a `k`-dimensional behavior from samples (one row per time step)
/// using windows of `depth` steps.
#[pyfunction]
fn identify_subspace(samples: Vec<Vec<f64>>, depth: usize, k: usize) -> PyResult<PyBehaviorEstimate> {
    let columns: Vec<DVector<f64>> = samples.into_iter().map(DVector::from_vec).collect();
    let w = Trajectory::from_samples(&columns).map_err(to_py)?;
    behavior::identify_subspace(&w, depth, k)
        .map(PyBehaviorEstimate)
        .map_err(to_py)
}

/// Result of one receding-horizon run.
#[pyclass(name = "ClosedLoop", module = "georls_py", frozen)]
struct PyClosedLoop(control::ClosedLoopLog);

#[pymethods]
impl PyClosedLoop {
    /// Noiseless plant outputs, one row per step.
    #[getter]
    fn outputs(&self) -> Vec<Vec<f64>> {
        self.0.records.iter().map(|r| r.y_true.clone()).collect()
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.0.records.iter().map(|r| r.u.clone()).collect()
    }

    #[getter]
    fn lambda_trace(&self) -> Vec<f64> {
        self.0.lambda_trace()
    }

    /// `max |y(t) − r(t)|` over steps `t ≥ start` (1-based).
    fn max_tracking_error(&self, start: usize) -> f64 {
        self.0.max_tracking_error(start)
    }

    fn settling_step(&self, band: f64) -> Option<usize> {
        self.0.settling_step(band)
    }
}

/// Identifies `system` from noisy data and closes the loop around it.
/// Unset arguments keep the preset's values.
#[pyfunction]
#[pyo3(signature = (system = "double_integrator", seed = 0, sigma = None, rho_deg = None, gamma = None, steps = None))]
fn closed_loop(
    py: Python<'_>,
    system: &str,
    seed: u64,
    sigma: Option<f64>,
    rho_deg: Option<f64>,
    gamma: Option<f64>,
    steps: Option<usize>,
) -> PyResult<PyClosedLoop> {
    let mut cfg = ControlConfig::preset(system).map_err(to_py)?;
    cfg.seed = seed;
    if let Some(s) = sigma {
        cfg.sigma = s;
    }
    if let Some(r) = rho_deg {
        cfg.rho_deg = r;
    }
    if let Some(g) = gamma {
        cfg.gamma = g;
    }
    if let Some(t) = steps {
        cfg.data_len = Some(cfg.data_len());
        cfg.steps = t;
    }
    cfg.validate().map_err(to_py)?;
    let log = py
        .detach(|| {
            let sys = cfg.system.build()?;
            let id = control::identify(&sys, &cfg, cfg.sigma)?;
            control::receding_horizon(&sys, &id.estimate, &cfg, &id.noise)
        })
        .map_err(to_py)?;
    Ok(PyClosedLoop(log))
}

/// Runs the oracle suite; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (instances = 50, seed = 0, inject_fault = false))]
fn verify(py: Python<'_>, instances: usize, seed: u64, inject_fault: bool) -> PyResult<(bool, String)> {
    let opts = VerifyOptions {
        seed,
        inject_fault,
        instances,
        ..Default::default()
    };
    let report = py.detach(|| oracle::verify(&opts)).map_err(to_py)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn georls_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyStiefelPoint>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyBehaviorEstimate>()?;
    m.add_class::<PyClosedLoop>()?;
    m.add_function(wrap_pyfunction!(chordal_distance, m)?)?;
    m.add_function(wrap_pyfunction!(identify_subspace, m)?)?;
    m.add_function(wrap_pyfunction!(closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
