//! Measurement and motion-prior residuals with analytic Jacobians.
//!
//! Every observation factor is evaluated at an interpolated state inside one
//! segment and linearized with respect to the two bounding knots. Jacobian
//! columns are laid out as `[left knot tangent | right knot tangent]`, each
//! following [`StateLayout`].

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::gp_prior::{HybridPrior, PriorKind};
use crate::so3::{self, Rotation};
use crate::trajectory::{
    to_nanos, Gravity, Interpolated, KnotState, RigidTransform, StateConfig, StateLayout,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub t: f64,
    pub sensor: usize,
    /// Point in the LiDAR frame.
    pub point: Vector3<f64>,
}

impl LidarPoint {
    pub fn new(t: f64, sensor: usize, point: Vector3<f64>) -> Self {
        Self { t, sensor, point }
    }
}

/// A gyroscope or accelerometer reading in its sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub sensor: usize,
    pub value: Vector3<f64>,
    pub saturated: bool,
}

impl ImuSample {
    pub fn new(t: f64, sensor: usize, value: Vector3<f64>) -> Self {
        Self {
            t,
            sensor,
            value,
            saturated: false,
        }
    }
}

/// Local plane around the nearest map neighbours of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCorrespondence {
    /// A map point on the plane.
    pub point: Vector3<f64>,
    /// Unit normal.
    pub normal: Vector3<f64>,
}

impl PlaneCorrespondence {
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(&(x - self.point))
    }
}

/// Measurement noise, stored alongside the whitening factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    lidar_variance: f64,
    gyro_cov: Matrix3<f64>,
    accel_cov: Matrix3<f64>,
    gyro_whiten: Matrix3<f64>,
    accel_whiten: Matrix3<f64>,
}

impl NoiseModel {
    pub fn new(lidar_variance: f64, gyro_cov: Matrix3<f64>, accel_cov: Matrix3<f64>) -> Result<Self> {
        if !(lidar_variance > 0.0) {
            return Err(Error::NotPositiveDefinite("lidar variance"));
        }
        let whiten = |c: &Matrix3<f64>, what| -> Result<Matrix3<f64>> {
            if (c - c.transpose()).abs().max() > 1e-12 * c.abs().max() {
                return Err(Error::NotPositiveDefinite(what));
            }
            let l = c.cholesky().ok_or(Error::NotPositiveDefinite(what))?;
            l.l().try_inverse().ok_or(Error::NotPositiveDefinite(what))
        };
        Ok(Self {
            lidar_variance,
            gyro_whiten: whiten(&gyro_cov, "gyro covariance")?,
            accel_whiten: whiten(&accel_cov, "accel covariance")?,
            gyro_cov,
            accel_cov,
        })
    }

    /// From standard deviations: point-to-plane (m), gyro (rad/s), accel (m/s²).
    pub fn isotropic(sigma_lidar: f64, sigma_gyro: f64, sigma_accel: f64) -> Result<Self> {
        Self::new(
            sigma_lidar * sigma_lidar,
            Matrix3::identity() * sigma_gyro * sigma_gyro,
            Matrix3::identity() * sigma_accel * sigma_accel,
        )
    }

    pub fn lidar_variance(&self) -> f64 {
        self.lidar_variance
    }

    pub fn gyro_covariance(&self) -> &Matrix3<f64> {
        &self.gyro_cov
    }

    pub fn accel_covariance(&self) -> &Matrix3<f64> {
        &self.accel_cov
    }

    /// `L⁻¹` with `Σ_g = L Lᵀ`.
    pub fn gyro_whitening(&self) -> &Matrix3<f64> {
        &self.gyro_whiten
    }

    pub fn accel_whitening(&self) -> &Matrix3<f64> {
        &self.accel_whiten
    }
}

/// Residual and Jacobian w.r.t. `[left knot, right knot]` tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearized {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl Linearized {
    fn zeros(rows: usize, knot_dim: usize) -> Self {
        Self {
            residual: DVector::zeros(rows),
            jacobian: DMatrix::zeros(rows, 2 * knot_dim),
        }
    }

    /// Pre-multiplies residual and Jacobian by a square-root information.
    pub fn whiten(&mut self, w: &DMatrix<f64>) {
        self.residual = w * &self.residual;
        self.jacobian = w * &self.jacobian;
    }

    pub fn scale(&mut self, s: f64) {
        self.residual *= s;
        self.jacobian *= s;
    }
}

#[inline]
fn add_block<const M: usize>(jac: &mut DMatrix<f64>, col: usize, a: &SMatrix<f64, M, 3>, b: &Matrix3<f64>) {
    let mut v = jac.fixed_view_mut::<M, 3>(0, col);
    v += a * b;
}

#[inline]
fn add_scaled<const M: usize>(jac: &mut DMatrix<f64>, col: usize, a: &SMatrix<f64, M, 3>, s: f64) {
    if s != 0.0 {
        let mut v = jac.fixed_view_mut::<M, 3>(0, col);
        v += a * s;
    }
}

/// Adds `A · ∂δR(τ)/∂(knots)` into `jac`.
fn chain_rotation<const M: usize>(
    jac: &mut DMatrix<f64>,
    a: &SMatrix<f64, M, 3>,
    ip: &Interpolated,
    layout: &StateLayout,
) {
    let d = &ip.rotation.d_rotation;
    let n = layout.dim;
    add_block(jac, layout.rotation, a, &d[0]);
    add_block(jac, n + layout.rotation, a, &d[2]);
    if let Some(o) = layout.omega {
        add_block(jac, o, a, &d[1]);
        add_block(jac, n + o, a, &d[3]);
    }
}

/// Adds `A · ∂ω(τ)/∂(knots)` into `jac`.
fn chain_omega<const M: usize>(
    jac: &mut DMatrix<f64>,
    a: &SMatrix<f64, M, 3>,
    ip: &Interpolated,
    layout: &StateLayout,
) {
    let d = &ip.rotation.d_omega;
    let n = layout.dim;
    add_block(jac, layout.rotation, a, &d[0]);
    add_block(jac, n + layout.rotation, a, &d[2]);
    if let Some(o) = layout.omega {
        add_block(jac, o, a, &d[1]);
        add_block(jac, n + o, a, &d[3]);
    }
}

/// Adds `A · ∂(row-th translation derivative)(τ)/∂(knots)`.
fn chain_translation<const M: usize>(
    jac: &mut DMatrix<f64>,
    a: &SMatrix<f64, M, 3>,
    ip: &Interpolated,
    layout: &StateLayout,
    row: usize,
) {
    let c = &ip.translation;
    for j in 0..c.order() {
        add_scaled(jac, layout.translation(j), a, c.lambda[(row, j)]);
        add_scaled(jac, layout.dim + layout.translation(j), a, c.psi[(row, j)]);
    }
}

fn chain_bias<const M: usize>(
    jac: &mut DMatrix<f64>,
    a: &SMatrix<f64, M, 3>,
    alpha: f64,
    offset: usize,
    layout: &StateLayout,
) {
    add_scaled(jac, offset, a, 1.0 - alpha);
    add_scaled(jac, layout.dim + offset, a, alpha);
}

/// Point-to-plane distance of `T(τ)·T_L·p̃` to the corresponding plane.
pub fn lidar_residual(
    ip: &Interpolated,
    layout: &StateLayout,
    extrinsic: &RigidTransform,
    point: &LidarPoint,
    corr: &PlaneCorrespondence,
) -> Linearized {
    let pb = extrinsic.apply(&point.point);
    let r = ip.state.rotation;
    let pw = r * pb + ip.state.position;
    let mut out = Linearized::zeros(1, layout.dim);
    out.residual[0] = corr.signed_distance(&pw);
    let n_t: RowVector3<f64> = corr.normal.transpose();
    let d_rot: RowVector3<f64> = -(n_t * r.matrix() * so3::hat(&pb));
    chain_rotation(&mut out.jacobian, &d_rot, ip, layout);
    chain_translation(&mut out.jacobian, &n_t, ip, layout, 0);
    out
}

/// `ω(τ) + b_g − R^B_G ω̃`
pub fn gyro_residual(
    ip: &Interpolated,
    layout: &StateLayout,
    extrinsic: &Rotation,
    sample: &ImuSample,
) -> Linearized {
    let j = sample.sensor;
    let mut out = Linearized::zeros(3, layout.dim);
    let e = ip.state.omega + ip.state.gyro_bias[j] - extrinsic * sample.value;
    out.residual.copy_from(&e);
    let eye = Matrix3::identity();
    chain_omega(&mut out.jacobian, &eye, ip, layout);
    chain_bias(&mut out.jacobian, &eye, ip.alpha, layout.gyro_bias_at(j), layout);
    out
}

/// `R(τ)ᵀ(a(τ) + g) + b_a − R^B_A ã`
pub fn accel_residual(
    ip: &Interpolated,
    layout: &StateLayout,
    extrinsic: &Rotation,
    gravity: &Gravity,
    sample: &ImuSample,
) -> Linearized {
    let j = sample.sensor;
    let mut out = Linearized::zeros(3, layout.dim);
    let rt = ip.state.rotation.inverse();
    let specific = rt * (ip.state.acceleration + gravity.0);
    let e = specific + ip.state.accel_bias[j] - extrinsic * sample.value;
    out.residual.copy_from(&e);
    chain_rotation(&mut out.jacobian, &so3::hat(&specific), ip, layout);
    if layout.translation_order > 2 {
        chain_translation(&mut out.jacobian, rt.matrix(), ip, layout, 2);
    }
    chain_bias(
        &mut out.jacobian,
        &Matrix3::identity(),
        ip.alpha,
        layout.accel_bias_at(j),
        layout,
    );
    out
}

fn put(jac: &mut DMatrix<f64>, row: usize, col: usize, m: &Matrix3<f64>) {
    jac.fixed_view_mut::<3, 3>(row, col).copy_from(m);
}

/// Kinematic factor between consecutive knots, with its information `Q⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub linearized: Linearized,
    pub information: DMatrix<f64>,
}

/// `x_k ⊖ Φ x_{k-1}` with the rotation part in the left knot's local chart.
pub fn gp_prior_residual(
    left: &KnotState,
    right: &KnotState,
    config: &StateConfig,
    prior: &HybridPrior,
) -> Result<PriorFactor> {
    let layout = config.layout();
    let n = layout.dim;
    let dt = right.t - left.t;
    let seg = crate::gp_interp::RotationSegment::new(
        config.rotation_kind(),
        dt,
        &left.rotation,
        &left.omega,
        &right.rotation,
        &right.omega,
    )?;
    let mut out = Linearized::zeros(n, n);
    let eye = Matrix3::identity();
    let [dte_l, dte_r] = seg.d_theta_end;

    let r0 = layout.rotation;
    put(&mut out.jacobian, r0, r0, &dte_l);
    put(&mut out.jacobian, r0, n + r0, &dte_r);
    let mut e = DVector::zeros(n);
    match config.rotation_kind() {
        PriorKind::ConstantVelocity => {
            let o = layout.omega.expect("constant-velocity rotation has ω");
            let [dtd_l, dtd_r, dtd_w] = seg.d_theta_dot_end;
            e.fixed_rows_mut::<3>(r0)
                .copy_from(&(seg.theta_end - dt * left.omega));
            e.fixed_rows_mut::<3>(o)
                .copy_from(&(seg.theta_dot_end - left.omega));
            put(&mut out.jacobian, r0, o, &(-dt * eye));
            put(&mut out.jacobian, o, r0, &dtd_l);
            put(&mut out.jacobian, o, o, &(-eye));
            put(&mut out.jacobian, o, n + r0, &dtd_r);
            put(&mut out.jacobian, o, n + o, &dtd_w);
        }
        _ => {
            e.fixed_rows_mut::<3>(r0).copy_from(&seg.theta_end);
        }
    }

    let trans_kind = config.translation_kind();
    let phi = crate::gp_prior::transition(trans_kind, 3, dt)?;
    let xt = right.translation_state(&layout) - &phi * left.translation_state(&layout);
    let p0 = layout.position;
    let tdim = 3 * layout.translation_order;
    e.rows_mut(p0, tdim).copy_from(&xt);
    out.jacobian.view_mut((p0, p0), (tdim, tdim)).copy_from(&(-&phi));
    out.jacobian
        .view_mut((p0, n + p0), (tdim, tdim))
        .fill_with_identity();

    for j in 0..layout.gyro_count {
        let o = layout.gyro_bias_at(j);
        e.fixed_rows_mut::<3>(o)
            .copy_from(&(right.gyro_bias[j] - left.gyro_bias[j]));
        put(&mut out.jacobian, o, o, &(-eye));
        put(&mut out.jacobian, o, n + o, &eye);
    }
    for j in 0..layout.accel_count {
        let o = layout.accel_bias_at(j);
        e.fixed_rows_mut::<3>(o)
            .copy_from(&(right.accel_bias[j] - left.accel_bias[j]));
        put(&mut out.jacobian, o, o, &(-eye));
        put(&mut out.jacobian, o, n + o, &eye);
    }
    out.residual = e;
    Ok(PriorFactor {
        linearized: out,
        information: prior.process_noise_inv(dt)?,
    })
}

/// Anything carrying a timestamp in seconds.
pub trait Stamped {
    fn stamp(&self) -> f64;
}

impl Stamped for LidarPoint {
    fn stamp(&self) -> f64 {
        self.t
    }
}

impl Stamped for ImuSample {
    fn stamp(&self) -> f64 {
        self.t
    }
}

/// Measurements of one segment `[t_{k-1}, t_k)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementBatch {
    pub lidar: Vec<LidarPoint>,
    pub gyro: Vec<ImuSample>,
    pub accel: Vec<ImuSample>,
}

impl MeasurementBatch {
    pub fn is_empty(&self) -> bool {
        self.lidar.is_empty() && self.gyro.is_empty() && self.accel.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BucketStats {
    /// Stamped before the window start; dropped.
    pub late: usize,
    /// Stamped at or after the window end; left for a later window.
    pub pending: usize,
    /// Saturated IMU samples excluded from the batches.
    pub saturated: usize,
}

fn bucket_into<T: Stamped + Clone>(
    items: &[T],
    stamps: &[i64],
    stats: &mut BucketStats,
    mut push: impl FnMut(usize, T),
) {
    let (first, last) = (stamps[0], stamps[stamps.len() - 1]);
    for item in items {
        let ns = to_nanos(item.stamp());
        if ns < first {
            stats.late += 1;
        } else if ns >= last {
            stats.pending += 1;
        } else {
            push(stamps.partition_point(|&s| s <= ns) - 1, item.clone());
        }
    }
}

/// Splits measurements into the segments delimited by `knot_stamps_ns`.
pub fn bucket_measurements(
    knot_stamps_ns: &[i64],
    lidar: &[LidarPoint],
    gyro: &[ImuSample],
    accel: &[ImuSample],
) -> (Vec<MeasurementBatch>, BucketStats) {
    let segments = knot_stamps_ns.len().saturating_sub(1);
    let mut batches = vec![MeasurementBatch::default(); segments];
    let mut stats = BucketStats::default();
    if segments == 0 {
        return (batches, stats);
    }
    bucket_into(lidar, knot_stamps_ns, &mut stats, |k, p| batches[k].lidar.push(p));
    let mut saturated = 0;
    bucket_into(gyro, knot_stamps_ns, &mut stats, |k, s| {
        if s.saturated {
            saturated += 1;
        } else {
            batches[k].gyro.push(s)
        }
    });
    bucket_into(accel, knot_stamps_ns, &mut stats, |k, s| {
        if s.saturated {
            saturated += 1;
        } else {
            batches[k].accel.push(s)
        }
    });
    stats.saturated = saturated;
    (batches, stats)
}
