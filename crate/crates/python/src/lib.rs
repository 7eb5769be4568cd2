//! Python bindings: SO(3) maps, motion-prior matrices, interpolation
//! coefficients and the simulate / estimate / evaluate pipeline.

use std::path::PathBuf;

use ctgp::config::ScenarioConfig;
use ctgp::gp_interp;
use ctgp::gp_prior::{self, NoiseDensity, PriorKind};
use ctgp::io::StampedPose;
use ctgp::metrics;
use ctgp::pipeline;
use ctgp::so3;
use nalgebra::{DMatrix, Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: ctgp::Error) -> PyErr {
    match e {
        ctgp::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn kind_of(name: &str) -> PyResult<PriorKind> {
    match name {
        "random_walk" | "rw" => Ok(PriorKind::RandomWalk),
        "constant_velocity" | "cv" => Ok(PriorKind::ConstantVelocity),
        "constant_acceleration" | "ca" => Ok(PriorKind::ConstantAcceleration),
        _ => Err(PyValueError::new_err(format!("unknown prior kind {name:?}"))),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows3(m: &Matrix3<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(v: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = v.len();
    let m = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| v[i][j]))
}

fn matrix3(v: &[Vec<f64>]) -> PyResult<Matrix3<f64>> {
    let m = matrix(v)?;
    if m.shape() != (3, 3) {
        return Err(PyValueError::new_err("expected a 3x3 matrix"));
    }
    Ok(Matrix3::from_fn(|i, j| m[(i, j)]))
}

/// Rotation matrix of an axis-angle vector.
#[pyfunction]
fn so3_exp(theta: [f64; 3]) -> Vec<Vec<f64>> {
    rows3(so3::exp(&Vector3::from(theta)).matrix())
}

/// Axis-angle vector of a rotation matrix.
#[pyfunction]
fn so3_log(r: Vec<Vec<f64>>) -> PyResult<[f64; 3]> {
    let v = so3::log_matrix(&matrix3(&r)?).map_err(to_py)?;
    Ok([v.x, v.y, v.z])
}

#[pyfunction]
fn right_jacobian(theta: [f64; 3]) -> Vec<Vec<f64>> {
    rows3(&so3::right_jacobian(&Vector3::from(theta)))
}

#[pyfunction]
fn right_jacobian_inv(theta: [f64; 3]) -> PyResult<Vec<Vec<f64>>> {
    so3::right_jacobian_inv(&Vector3::from(theta))
        .map(|m| rows3(&m))
        .map_err(to_py)
}

/// `Φ(dt)` for `n`-dimensional base states.
#[pyfunction]
#[pyo3(signature = (kind, dt, n = 1))]
fn transition(kind: &str, dt: f64, n: usize) -> PyResult<Vec<Vec<f64>>> {
    gp_prior::transition(kind_of(kind)?, n, dt)
        .map(|m| rows(&m))
        .map_err(to_py)
}

/// `Q(dt)` for the power-spectral density `qc` (`n × n`).
#[pyfunction]
fn process_noise(kind: &str, dt: f64, qc: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let qc = NoiseDensity::new(matrix(&qc)?).map_err(to_py)?;
    gp_prior::process_noise(kind_of(kind)?, dt, &qc)
        .map(|m| rows(&m))
        .map_err(to_py)
}

/// Scalar `(Λ, Ψ)` for a query `offset` seconds into a segment of length `dt`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn interp_coeffs(kind: &str, dt: f64, offset: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = gp_interp::interp_coeffs(kind_of(kind)?, dt, offset).map_err(to_py)?;
    Ok((rows(&c.lambda), rows(&c.psi)))
}

#[pyclass(name = "ScenarioConfig", module = "ctgp_py", skip_from_py_object)]
#[derive(Clone)]
struct PyScenarioConfig {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenarioConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: ScenarioConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ScenarioConfig::from_toml_str(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ScenarioConfig::load(&path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    #[setter]
    fn set_duration(&mut self, duration: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.duration = duration;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }
}

type Pose = (f64, [f64; 3], [f64; 4]);

fn pose_tuple(p: &StampedPose) -> Pose {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&p.rotation);
    (
        p.t,
        [p.position.x, p.position.y, p.position.z],
        [q.i, q.j, q.k, q.w],
    )
}

#[pyclass(name = "Simulation", module = "ctgp_py")]
struct PySimulation {
    inner: pipeline::Simulation,
}

#[pymethods]
impl PySimulation {
    #[getter]
    fn lidar_points(&self) -> usize {
        self.inner.streams.lidar.len()
    }

    #[getter]
    fn gyro_samples(&self) -> usize {
        self.inner.streams.gyro.len()
    }

    #[getter]
    fn accel_samples(&self) -> usize {
        self.inner.streams.accel.len()
    }

    /// Ground truth as `(t, [x, y, z], [qx, qy, qz, qw])`.
    fn truth(&self) -> Vec<Pose> {
        self.inner.truth.iter().map(pose_tuple).collect()
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::write_simulation(&dir, &self.inner).map_err(to_py)
    }
}

#[pyclass(name = "Estimate", module = "ctgp_py")]
struct PyEstimate {
    inner: pipeline::Estimate,
}

#[pymethods]
impl PyEstimate {
    /// Estimated poses as `(t, [x, y, z], [qx, qy, qz, qw])`.
    fn poses(&self) -> Vec<Pose> {
        self.inner.poses.iter().map(pose_tuple).collect()
    }

    #[getter]
    fn ate_rmse(&self) -> Option<f64> {
        self.inner.report.ate.as_ref().map(|a| a.rmse)
    }

    #[getter]
    fn diverged_windows(&self) -> usize {
        self.inner.report.diverged_windows
    }

    fn report_json(&self) -> String {
        serde_json::to_string(&self.inner.report).expect("serializable report")
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(to_py)
    }
}

#[pyfunction]
fn simulate(py: Python<'_>, config: &PyScenarioConfig) -> PyResult<PySimulation> {
    let cfg = config.inner.clone();
    py.detach(|| pipeline::simulate(&cfg))
        .map(|inner| PySimulation { inner })
        .map_err(to_py)
}

/// Runs the estimator; ATE and rate errors are filled in from the
/// simulation's ground truth.
#[pyfunction]
fn estimate(py: Python<'_>, config: &PyScenarioConfig, simulation: &PySimulation) -> PyResult<PyEstimate> {
    let cfg = config.inner.clone();
    let sim = &simulation.inner;
    py.detach(|| pipeline::estimate(&cfg, &sim.streams, Some(&sim.truth), Some(&sim.truth_rates)))
        .map(|inner| PyEstimate { inner })
        .map_err(to_py)
}

/// ATE report of two TUM files as a JSON string.
#[pyfunction]
fn evaluate(estimate: PathBuf, truth: PathBuf) -> PyResult<String> {
    let r: metrics::AteReport = pipeline::evaluate(&estimate, &truth).map_err(to_py)?;
    Ok(serde_json::to_string(&r).expect("serializable report"))
}

#[pymodule]
fn ctgp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(so3_exp, m)?)?;
    m.add_function(wrap_pyfunction!(so3_log, m)?)?;
    m.add_function(wrap_pyfunction!(right_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(right_jacobian_inv, m)?)?;
    m.add_function(wrap_pyfunction!(transition, m)?)?;
    m.add_function(wrap_pyfunction!(process_noise, m)?)?;
    m.add_function(wrap_pyfunction!(interp_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyScenarioConfig>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyEstimate>()?;
    Ok(())
}
