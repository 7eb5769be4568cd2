//! The continuous-time trajectory over a window of knots.
//!
//! The estimated state belongs to the primary sensor (body frame `B`). All
//! other sensors are reached through fixed extrinsics. Each knot carries the
//! rotation `R` (world-from-body), the body angular rate `ω`, world-frame
//! position/velocity/acceleration and one bias per IMU. Which of these are
//! actually estimated depends on the [`StateConfig`]; inactive fields stay at
//! zero.

use nalgebra::{DMatrix, DVector, DVectorView, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::ImuSample;
use crate::gp_interp::{coeffs_at_alpha, InterpCoeffs, RotationInterp, RotationSegment};
use crate::gp_prior::{HybridPrior, NoiseDensity, PriorBlock, PriorKind};
use crate::so3::{self, Rotation};

pub const NANOS_PER_SEC: f64 = 1e9;

/// Seconds → integer nanoseconds, rounding to the nearest tick.
#[inline]
pub fn to_nanos(t: f64) -> i64 {
    (t * NANOS_PER_SEC).round() as i64
}

#[inline]
pub fn to_secs(ns: i64) -> f64 {
    ns as f64 / NANOS_PER_SEC
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationModel {
    RandomWalk,
    ConstantVelocity,
    /// Constant velocity plus one random-walk bias per gyroscope.
    Gyro {
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationModel {
    RandomWalk,
    ConstantVelocity,
    ConstantAcceleration,
    /// Constant acceleration plus one random-walk bias per accelerometer.
    Accel {
        count: usize,
    },
}

/// One rotation choice and one translation choice, plus the LiDAR count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateConfig {
    pub rotation: RotationModel,
    pub translation: TranslationModel,
    pub lidar_count: usize,
}

impl StateConfig {
    pub fn new(rotation: RotationModel, translation: TranslationModel, lidar_count: usize) -> Result<Self> {
        if lidar_count == 0 {
            return Err(Error::InvalidStateConfig("at least one LiDAR is required".into()));
        }
        if rotation == (RotationModel::Gyro { count: 0 }) {
            return Err(Error::InvalidStateConfig(
                "gyro rotation model needs at least one gyroscope".into(),
            ));
        }
        if translation == (TranslationModel::Accel { count: 0 }) {
            return Err(Error::InvalidStateConfig(
                "accel translation model needs at least one accelerometer".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
            lidar_count,
        })
    }

    /// Full LiDAR-inertial configuration.
    pub fn full(lidars: usize, gyros: usize, accels: usize) -> Result<Self> {
        Self::new(
            RotationModel::Gyro { count: gyros },
            TranslationModel::Accel { count: accels },
            lidars,
        )
    }

    /// Every rotation × translation combination with the given sensor counts.
    pub fn all_combinations(lidars: usize, gyros: usize, accels: usize) -> Vec<StateConfig> {
        let rots = [
            RotationModel::RandomWalk,
            RotationModel::ConstantVelocity,
            RotationModel::Gyro { count: gyros },
        ];
        let trans = [
            TranslationModel::RandomWalk,
            TranslationModel::ConstantVelocity,
            TranslationModel::ConstantAcceleration,
            TranslationModel::Accel { count: accels },
        ];
        rots.iter()
            .flat_map(|&r| trans.iter().map(move |&t| (r, t)))
            .filter_map(|(r, t)| StateConfig::new(r, t, lidars).ok())
            .collect()
    }

    pub fn rotation_kind(&self) -> PriorKind {
        match self.rotation {
            RotationModel::RandomWalk => PriorKind::RandomWalk,
            _ => PriorKind::ConstantVelocity,
        }
    }

    pub fn translation_kind(&self) -> PriorKind {
        match self.translation {
            TranslationModel::RandomWalk => PriorKind::RandomWalk,
            TranslationModel::ConstantVelocity => PriorKind::ConstantVelocity,
            _ => PriorKind::ConstantAcceleration,
        }
    }

    pub fn gyro_count(&self) -> usize {
        match self.rotation {
            RotationModel::Gyro { count } => count,
            _ => 0,
        }
    }

    pub fn accel_count(&self) -> usize {
        match self.translation {
            TranslationModel::Accel { count } => count,
            _ => 0,
        }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self)
    }

    /// Block-diagonal prior `[rotation, translation, gyro biases, accel biases]`.
    pub fn hybrid_prior(&self, d: &PriorDensities) -> Result<HybridPrior> {
        let mut blocks = vec![
            PriorBlock::new(self.rotation_kind(), NoiseDensity::isotropic(3, d.rotation)?),
            PriorBlock::new(
                self.translation_kind(),
                NoiseDensity::isotropic(3, d.translation)?,
            ),
        ];
        if self.gyro_count() > 0 {
            blocks.push(PriorBlock::new(
                PriorKind::RandomWalk,
                NoiseDensity::isotropic(3 * self.gyro_count(), d.gyro_bias)?,
            ));
        }
        if self.accel_count() > 0 {
            blocks.push(PriorBlock::new(
                PriorKind::RandomWalk,
                NoiseDensity::isotropic(3 * self.accel_count(), d.accel_bias)?,
            ));
        }
        Ok(HybridPrior::new(blocks))
    }
}

/// Isotropic power-spectral densities of the four prior blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorDensities {
    /// Angular acceleration (constant velocity) or rate (random walk) density.
    pub rotation: f64,
    /// Jerk density for constant acceleration; lower-order for RW/CV.
    pub translation: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for PriorDensities {
    fn default() -> Self {
        Self {
            rotation: 1e-2,
            translation: 1e-1,
            gyro_bias: 1e-5,
            accel_bias: 1e-5,
        }
    }
}

/// Offsets of each 3-vector group inside one knot's tangent vector.
/// Order: `[δθ, δω?, δp, δv?, δa?, δb_g…, δb_a…]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub rotation: usize,
    pub omega: Option<usize>,
    pub position: usize,
    pub velocity: Option<usize>,
    pub acceleration: Option<usize>,
    pub gyro_bias: usize,
    pub gyro_count: usize,
    pub accel_bias: usize,
    pub accel_count: usize,
    pub rotation_order: usize,
    pub translation_order: usize,
    pub dim: usize,
}

impl StateLayout {
    fn new(c: &StateConfig) -> Self {
        let rotation_order = c.rotation_kind().order();
        let translation_order = c.translation_kind().order();
        let position = 3 * rotation_order;
        let gyro_bias = position + 3 * translation_order;
        let accel_bias = gyro_bias + 3 * c.gyro_count();
        Self {
            rotation: 0,
            omega: (rotation_order > 1).then_some(3),
            position,
            velocity: (translation_order > 1).then_some(position + 3),
            acceleration: (translation_order > 2).then_some(position + 6),
            gyro_bias,
            gyro_count: c.gyro_count(),
            accel_bias,
            accel_count: c.accel_count(),
            rotation_order,
            translation_order,
            dim: accel_bias + 3 * c.accel_count(),
        }
    }

    /// Offset of the `i`-th translation derivative (0 = p, 1 = v, 2 = a).
    pub fn translation(&self, i: usize) -> usize {
        self.position + 3 * i
    }

    pub fn gyro_bias_at(&self, j: usize) -> usize {
        self.gyro_bias + 3 * j
    }

    pub fn accel_bias_at(&self, j: usize) -> usize {
        self.accel_bias + 3 * j
    }
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.inverse();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Fixed sensor-to-body calibration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extrinsics {
    /// `T^B_{L_j}`
    pub lidar: Vec<RigidTransform>,
    /// `R^B_{G_j}`
    pub gyro: Vec<Rotation>,
    /// `R^B_{A_j}`
    pub accel: Vec<Rotation>,
}

impl Extrinsics {
    pub fn lidar(&self, j: usize) -> Result<&RigidTransform> {
        self.lidar.get(j).ok_or(Error::UnknownSensor {
            kind: "lidar",
            index: j,
        })
    }

    pub fn gyro(&self, j: usize) -> Result<&Rotation> {
        self.gyro.get(j).ok_or(Error::UnknownSensor {
            kind: "gyro",
            index: j,
        })
    }

    pub fn accel(&self, j: usize) -> Result<&Rotation> {
        self.accel.get(j).ok_or(Error::UnknownSensor {
            kind: "accel",
            index: j,
        })
    }
}

/// Gravity in the world frame, so that a resting accelerometer reads
/// `Rᵀ g` (positive "up" when the world z axis points up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gravity(pub Vector3<f64>);

pub const STANDARD_GRAVITY: f64 = 9.81;

impl Default for Gravity {
    fn default() -> Self {
        Gravity(Vector3::new(0.0, 0.0, STANDARD_GRAVITY))
    }
}

/// One control state `x(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotState {
    pub t: f64,
    pub rotation: Rotation,
    pub omega: Vector3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub gyro_bias: Vec<Vector3<f64>>,
    pub accel_bias: Vec<Vector3<f64>>,
}

impl KnotState {
    /// Identity pose, zero rates and biases.
    pub fn identity(t: f64, layout: &StateLayout) -> Self {
        Self {
            t,
            rotation: Rotation::identity(),
            omega: Vector3::zeros(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
            gyro_bias: vec![Vector3::zeros(); layout.gyro_count],
            accel_bias: vec![Vector3::zeros(); layout.accel_count],
        }
    }

    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.position)
    }

    /// Translation Markov state `[p, v, a]` truncated to the prior order.
    pub fn translation_state(&self, layout: &StateLayout) -> DVector<f64> {
        let mut out = DVector::zeros(3 * layout.translation_order);
        for (i, v) in [&self.position, &self.velocity, &self.acceleration]
            .into_iter()
            .take(layout.translation_order)
            .enumerate()
        {
            out.fixed_rows_mut::<3>(3 * i).copy_from(v);
        }
        out
    }

    fn set_translation_state(&mut self, layout: &StateLayout, x: &DVector<f64>) {
        for i in 0..layout.translation_order {
            let v: Vector3<f64> = x.fixed_rows::<3>(3 * i).into_owned();
            match i {
                0 => self.position = v,
                1 => self.velocity = v,
                _ => self.acceleration = v,
            }
        }
    }

    /// `self ⊞ δ`: rotation on the right tangent space, the rest additive.
    pub fn retract(&self, layout: &StateLayout, delta: DVectorView<'_, f64>) -> KnotState {
        let v3 = |o: usize| -> Vector3<f64> { delta.fixed_rows::<3>(o).into_owned() };
        let mut out = self.clone();
        let mut r = self.rotation * so3::exp(&v3(layout.rotation));
        r.renormalize();
        out.rotation = r;
        if let Some(o) = layout.omega {
            out.omega += v3(o);
        }
        out.position += v3(layout.position);
        if let Some(o) = layout.velocity {
            out.velocity += v3(o);
        }
        if let Some(o) = layout.acceleration {
            out.acceleration += v3(o);
        }
        for j in 0..layout.gyro_count {
            out.gyro_bias[j] += v3(layout.gyro_bias_at(j));
        }
        for j in 0..layout.accel_count {
            out.accel_bias[j] += v3(layout.accel_bias_at(j));
        }
        out
    }

    /// `self ⊟ reference`, the inverse of [`KnotState::retract`].
    pub fn local_difference(&self, reference: &KnotState, layout: &StateLayout) -> DVector<f64> {
        let mut d = DVector::zeros(layout.dim);
        d.fixed_rows_mut::<3>(layout.rotation)
            .copy_from(&so3::minus(&reference.rotation, &self.rotation));
        if let Some(o) = layout.omega {
            d.fixed_rows_mut::<3>(o)
                .copy_from(&(self.omega - reference.omega));
        }
        d.fixed_rows_mut::<3>(layout.position)
            .copy_from(&(self.position - reference.position));
        if let Some(o) = layout.velocity {
            d.fixed_rows_mut::<3>(o)
                .copy_from(&(self.velocity - reference.velocity));
        }
        if let Some(o) = layout.acceleration {
            d.fixed_rows_mut::<3>(o)
                .copy_from(&(self.acceleration - reference.acceleration));
        }
        for j in 0..layout.gyro_count {
            d.fixed_rows_mut::<3>(layout.gyro_bias_at(j))
                .copy_from(&(self.gyro_bias[j] - reference.gyro_bias[j]));
        }
        for j in 0..layout.accel_count {
            d.fixed_rows_mut::<3>(layout.accel_bias_at(j))
                .copy_from(&(self.accel_bias[j] - reference.accel_bias[j]));
        }
        d
    }
}

/// Mean propagation of a knot by `dt` under the configured priors.
///
/// Rotation advances in the local chart of the previous knot: with the
/// constant-velocity prior `θ = Δt·ω`, and since `ω` is the axis of `θ`,
/// `J_r(θ)·ω = ω`, so the body rate is unchanged. Vector blocks advance by
/// `Φ(Δt)` and biases keep their value.
pub fn propagate(last: &KnotState, dt: f64, config: &StateConfig) -> Result<KnotState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval {
            dt,
            expected: "positive",
        });
    }
    let layout = config.layout();
    let mut next = last.clone();
    next.t = last.t + dt;
    if config.rotation_kind() == PriorKind::ConstantVelocity {
        let theta = last.omega * dt;
        let mut r = last.rotation * so3::exp(&theta);
        r.renormalize();
        next.rotation = r;
        next.omega = so3::right_jacobian(&theta) * last.omega;
    }
    let phi = crate::gp_prior::transition(config.translation_kind(), 3, dt)?;
    let x = phi * last.translation_state(&layout);
    next.set_translation_state(&layout, &x);
    Ok(next)
}

/// Per-segment interpolation context with the query-independent parts
/// precomputed.
#[derive(Debug, Clone)]
pub struct SegmentInterp {
    /// Index of the left knot; the right knot is `left + 1`.
    pub left: usize,
    pub t_left: f64,
    pub dt: f64,
    pub rotation: RotationSegment,
    translation_kind: PriorKind,
    trans_left: DVector<f64>,
    trans_right: DVector<f64>,
    layout: StateLayout,
    bias_left: (Vec<Vector3<f64>>, Vec<Vector3<f64>>),
    bias_right: (Vec<Vector3<f64>>, Vec<Vector3<f64>>),
}

/// The interpolated state at one query time together with the coefficients
/// needed to chain measurement Jacobians back onto the bounding knots.
#[derive(Debug, Clone)]
pub struct Interpolated {
    pub state: KnotState,
    pub alpha: f64,
    pub rotation: RotationInterp,
    pub translation: InterpCoeffs,
}

impl SegmentInterp {
    pub fn new(left_index: usize, left: &KnotState, right: &KnotState, config: &StateConfig) -> Result<Self> {
        let layout = config.layout();
        let dt = right.t - left.t;
        if !(dt > 0.0) {
            return Err(Error::NonMonotoneTimes);
        }
        let rotation = RotationSegment::new(
            config.rotation_kind(),
            dt,
            &left.rotation,
            &left.omega,
            &right.rotation,
            &right.omega,
        )?;
        Ok(Self {
            left: left_index,
            t_left: left.t,
            dt,
            rotation,
            translation_kind: config.translation_kind(),
            trans_left: left.translation_state(&layout),
            trans_right: right.translation_state(&layout),
            layout,
            bias_left: (left.gyro_bias.clone(), left.accel_bias.clone()),
            bias_right: (right.gyro_bias.clone(), right.accel_bias.clone()),
        })
    }

    #[inline]
    pub fn alpha(&self, t: f64) -> f64 {
        (t - self.t_left) / self.dt
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    fn translation_at(&self, c: &InterpCoeffs, row: usize) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for j in 0..c.order() {
            out += c.lambda[(row, j)] * self.trans_left.fixed_rows::<3>(3 * j)
                + c.psi[(row, j)] * self.trans_right.fixed_rows::<3>(3 * j);
        }
        out
    }

    /// Pose only; the cheap path used for energy evaluation and map updates.
    pub fn pose_at(&self, t: f64) -> RigidTransform {
        let alpha = self.alpha(t);
        let c = coeffs_at_alpha(self.translation_kind, self.dt, alpha);
        RigidTransform::new(self.rotation.rotation_at(alpha), self.translation_at(&c, 0))
    }

    /// Full state plus Jacobian ingredients at time `t`.
    pub fn at(&self, t: f64, with_omega_jacobians: bool) -> Interpolated {
        let alpha = self.alpha(t);
        let rotation = self.rotation.evaluate(alpha, with_omega_jacobians);
        let c = coeffs_at_alpha(self.translation_kind, self.dt, alpha);
        let order = c.order();
        let lerp = |a: &Vec<Vector3<f64>>, b: &Vec<Vector3<f64>>| -> Vec<Vector3<f64>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
                .collect()
        };
        let state = KnotState {
            t,
            rotation: rotation.rotation,
            omega: if self.layout.omega.is_some() {
                rotation.omega
            } else {
                Vector3::zeros()
            },
            position: self.translation_at(&c, 0),
            velocity: if order > 1 {
                self.translation_at(&c, 1)
            } else {
                Vector3::zeros()
            },
            acceleration: if order > 2 {
                self.translation_at(&c, 2)
            } else {
                Vector3::zeros()
            },
            gyro_bias: lerp(&self.bias_left.0, &self.bias_right.0),
            accel_bias: lerp(&self.bias_left.1, &self.bias_right.1),
        };
        Interpolated {
            state,
            alpha,
            rotation,
            translation: c,
        }
    }
}

/// Knots over `[t_0, t_K]`, queryable on the half-open window `[t_0, t_K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    config: StateConfig,
    stamps: Vec<i64>,
    knots: Vec<KnotState>,
}

impl Trajectory {
    pub fn new(config: StateConfig, knots: Vec<KnotState>) -> Result<Self> {
        let stamps: Vec<i64> = knots.iter().map(|k| to_nanos(k.t)).collect();
        if stamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotoneTimes);
        }
        let layout = config.layout();
        for k in &knots {
            if k.gyro_bias.len() != layout.gyro_count || k.accel_bias.len() != layout.accel_count {
                return Err(Error::DimensionMismatch {
                    expected: layout.gyro_count + layout.accel_count,
                    got: k.gyro_bias.len() + k.accel_bias.len(),
                });
            }
        }
        Ok(Self {
            config,
            stamps,
            knots,
        })
    }

    /// `segments + 1` knots at `t0 + k·dt`, all at the identity/zero state.
    pub fn stationary(config: StateConfig, t0: f64, dt: f64, segments: usize) -> Result<Self> {
        let layout = config.layout();
        let t0_ns = to_nanos(t0);
        let dt_ns = to_nanos(dt);
        if dt_ns <= 0 {
            return Err(Error::InvalidInterval {
                dt,
                expected: "positive",
            });
        }
        let knots = (0..=segments as i64)
            .map(|k| KnotState::identity(to_secs(t0_ns + k * dt_ns), &layout))
            .collect();
        Self::new(config, knots)
    }

    pub fn config(&self) -> &StateConfig {
        &self.config
    }

    pub fn layout(&self) -> StateLayout {
        self.config.layout()
    }

    pub fn knots(&self) -> &[KnotState] {
        &self.knots
    }

    pub fn knot_stamps(&self) -> &[i64] {
        &self.stamps
    }

    pub fn segments(&self) -> usize {
        self.knots.len().saturating_sub(1)
    }

    pub fn start(&self) -> f64 {
        to_secs(self.stamps[0])
    }

    pub fn end(&self) -> f64 {
        to_secs(*self.stamps.last().expect("non-empty trajectory"))
    }

    /// Replaces the knot values, keeping their timestamps.
    pub fn set_knots(&mut self, knots: Vec<KnotState>) {
        assert_eq!(knots.len(), self.knots.len());
        self.knots = knots;
        for (k, &s) in self.knots.iter_mut().zip(&self.stamps) {
            k.t = to_secs(s);
        }
    }

    /// Segment containing `t` (index of its left knot).
    pub fn locate(&self, t: f64) -> Result<usize> {
        let ns = to_nanos(t);
        let (first, last) = (self.stamps[0], *self.stamps.last().unwrap());
        if self.stamps.len() < 2 || ns < first || ns >= last {
            return Err(Error::OutOfWindow {
                t,
                start: to_secs(first),
                end: to_secs(last),
            });
        }
        Ok(self.stamps.partition_point(|&s| s <= ns) - 1)
    }

    pub fn segment(&self, k: usize) -> Result<SegmentInterp> {
        if k + 1 >= self.knots.len() {
            return Err(Error::OutOfWindow {
                t: self.knots.get(k).map_or(f64::NAN, |x| x.t),
                start: self.start(),
                end: self.end(),
            });
        }
        SegmentInterp::new(k, &self.knots[k], &self.knots[k + 1], &self.config)
    }

    /// Posterior-mean state at `t`.
    pub fn query(&self, t: f64) -> Result<KnotState> {
        let k = self.locate(t)?;
        if to_nanos(t) == self.stamps[k] {
            return Ok(self.knots[k].clone());
        }
        Ok(self.segment(k)?.at(t, false).state)
    }

    /// `T(t) · T^B_{L_j}` for LiDAR `j`.
    pub fn sensor_pose(&self, t: f64, extrinsics: &Extrinsics, lidar: usize) -> Result<RigidTransform> {
        let ext = extrinsics.lidar(lidar)?;
        Ok(self.query(t)?.pose().compose(ext))
    }

    /// Appends the mean prediction one interval past the last knot.
    pub fn extend(&mut self, dt: f64) -> Result<()> {
        let dt_ns = to_nanos(dt);
        let last = self.knots.last().expect("non-empty trajectory");
        let mut next = propagate(last, dt, &self.config)?;
        let ns = self.stamps.last().unwrap() + dt_ns;
        next.t = to_secs(ns);
        self.stamps.push(ns);
        self.knots.push(next);
        Ok(())
    }

    /// Drops the oldest knot and returns it.
    pub fn pop_front(&mut self) -> KnotState {
        self.stamps.remove(0);
        self.knots.remove(0)
    }
}

/// Diagonal standard deviations of the initial prior `K₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSigmas {
    pub rotation: f64,
    pub omega: f64,
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialSigmas {
    fn default() -> Self {
        Self {
            rotation: 1e-3,
            omega: 0.1,
            position: 1e-3,
            velocity: 0.1,
            acceleration: 0.5,
            gyro_bias: 0.05,
            accel_bias: 0.1,
        }
    }
}

impl InitialSigmas {
    pub fn covariance(&self, layout: &StateLayout) -> DMatrix<f64> {
        let mut diag = DVector::zeros(layout.dim);
        let mut set = |o: usize, s: f64| diag.fixed_rows_mut::<3>(o).fill(s * s);
        set(layout.rotation, self.rotation);
        if let Some(o) = layout.omega {
            set(o, self.omega);
        }
        set(layout.position, self.position);
        if let Some(o) = layout.velocity {
            set(o, self.velocity);
        }
        if let Some(o) = layout.acceleration {
            set(o, self.acceleration);
        }
        for j in 0..layout.gyro_count {
            set(layout.gyro_bias_at(j), self.gyro_bias);
        }
        for j in 0..layout.accel_count {
            set(layout.accel_bias_at(j), self.accel_bias);
        }
        DMatrix::from_diagonal(&diag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub t0: f64,
    pub interval: f64,
    pub segments: usize,
    /// Length of the stationary span used for gravity and the initial map.
    pub init_duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub trajectory: Trajectory,
    pub gravity: Gravity,
    /// Prior mean `μ₀` (the first knot) and covariance `K₀`.
    pub prior_mean: KnotState,
    pub prior_covariance: DMatrix<f64>,
    /// Set when the accelerometer spread during the stationary span exceeds
    /// the threshold, i.e. the platform probably was not at rest.
    pub moving_start: bool,
    pub accel_samples_used: usize,
}

/// Standard deviation (m/s², any axis) above which the start is not treated
/// as stationary.
pub const STATIONARY_ACCEL_STD: f64 = 0.3;

/// Builds the first window at the identity pose with zero rates and biases
/// and estimates gravity from the mean accelerometer reading over the
/// stationary span. Without accelerometer data gravity defaults to
/// `[0, 0, 9.81]`.
pub fn initialize(
    config: &StateConfig,
    window: &WindowConfig,
    accel: &[ImuSample],
    extrinsics: &Extrinsics,
    sigmas: &InitialSigmas,
) -> Result<Initialization> {
    let trajectory = Trajectory::stationary(*config, window.t0, window.interval, window.segments)?;
    let end = window.t0 + window.init_duration;
    let mut sum = Vector3::zeros();
    let mut sum_sq = Vector3::zeros();
    let mut n = 0usize;
    for s in accel.iter().filter(|s| s.t >= window.t0 && s.t < end) {
        let r = extrinsics.accel(s.sensor)?;
        let a = r * s.value;
        sum += a;
        sum_sq += a.component_mul(&a);
        n += 1;
    }
    let (gravity, moving_start) = if n == 0 {
        (Gravity::default(), false)
    } else {
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean.component_mul(&mean);
        let moving = var.iter().any(|v| v.max(0.0).sqrt() > STATIONARY_ACCEL_STD);
        if moving {
            log_warning("accelerometer variance during initialization suggests motion");
        }
        let g = if mean.norm() > 1e-6 {
            mean.normalize() * STANDARD_GRAVITY
        } else {
            Gravity::default().0
        };
        (Gravity(g), moving)
    };
    let layout = config.layout();
    Ok(Initialization {
        prior_mean: trajectory.knots()[0].clone(),
        prior_covariance: sigmas.covariance(&layout),
        trajectory,
        gravity,
        moving_start,
        accel_samples_used: n,
    })
}

pub(crate) fn log_warning(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Rotation of a matrix given as roll/pitch/yaw in radians (`Rz·Ry·Rx`).
pub fn rotation_from_rpy(roll: f64, pitch: f64, yaw: f64) -> Rotation {
    Rotation::from_euler_angles(roll, pitch, yaw)
}

/// Convenience for tests and bindings.
pub fn rotation_from_matrix(m: &Matrix3<f64>) -> Result<Rotation> {
    let theta = so3::log_matrix(m)?;
    Ok(so3::exp(&theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full() -> StateConfig {
        StateConfig::full(1, 1, 1).unwrap()
    }

    #[test]
    fn twelve_combinations_and_dimensions() {
        let all = StateConfig::all_combinations(1, 2, 1);
        assert_eq!(all.len(), 12);
        let dims: Vec<usize> = all.iter().map(|c| c.layout().dim).collect();
        // rows: RW, CV, Gyro(2) × RW, CV, CA, Accel(1)
        assert_eq!(dims, vec![6, 9, 12, 15, 9, 12, 15, 18, 15, 18, 21, 24]);
        assert_eq!(StateConfig::full(2, 2, 3).unwrap().layout().dim, 15 + 6 + 9);
        for c in &all {
            assert_eq!(
                c.hybrid_prior(&PriorDensities::default()).unwrap().dim(),
                c.layout().dim
            );
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(StateConfig::new(RotationModel::RandomWalk, TranslationModel::RandomWalk, 0).is_err());
        assert!(StateConfig::new(RotationModel::Gyro { count: 0 }, TranslationModel::RandomWalk, 1).is_err());
        assert!(
            StateConfig::new(RotationModel::RandomWalk, TranslationModel::Accel { count: 0 }, 1).is_err()
        );
    }

    #[test]
    fn propagate_examples() {
        let c = full();
        let l = c.layout();
        let mut k = KnotState::identity(0.0, &l);
        k.gyro_bias[0] = Vector3::new(0.01, 0.02, 0.03);
        let n = propagate(&k, 0.04, &c).unwrap();
        assert_eq!(n.rotation, k.rotation);
        assert_eq!(n.position, k.position);
        assert_eq!(n.gyro_bias, k.gyro_bias);

        let mut k = KnotState::identity(0.0, &l);
        k.omega = Vector3::new(0.0, 0.0, 1.0);
        let n = propagate(&k, 0.04, &c).unwrap();
        let expect = so3::exp(&Vector3::new(0.0, 0.0, 0.04));
        assert!((n.rotation.matrix() - expect.matrix()).abs().max() < 1e-15);
        assert!((n.omega - k.omega).norm() < 1e-15);

        let mut k = KnotState::identity(0.0, &l);
        k.velocity = Vector3::new(1.0, 0.0, 0.0);
        let n = propagate(&k, 0.5, &c).unwrap();
        assert_eq!(n.position, Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(n.velocity, k.velocity);
        assert!((n.t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn query_reproduces_knots_and_rejects_outside() {
        let c = full();
        let mut traj = Trajectory::stationary(c, 1.0, 0.04, 3).unwrap();
        let mut knots = traj.knots().to_vec();
        for (i, k) in knots.iter_mut().enumerate() {
            k.rotation = so3::exp(&Vector3::new(0.1 * i as f64, -0.05, 0.02 * i as f64));
            k.position = Vector3::new(i as f64, 0.5, -0.1);
            k.omega = Vector3::new(0.3, 0.1, -0.2);
        }
        traj.set_knots(knots.clone());
        for k in knots.iter().take(3) {
            assert_eq!(&traj.query(k.t).unwrap(), k);
        }
        assert!(matches!(traj.query(traj.end()), Err(Error::OutOfWindow { .. })));
        assert!(traj.query(0.999).is_err());
        assert_eq!(traj.locate(1.04).unwrap(), 1);
        assert_eq!(traj.locate(1.039999995).unwrap(), 0);
    }

    #[test]
    fn linear_motion_midpoint() {
        let c = full();
        let l = c.layout();
        let mut a = KnotState::identity(0.0, &l);
        a.velocity = Vector3::new(2.0, -1.0, 0.5);
        let b = propagate(&a, 0.04, &c).unwrap();
        let traj = Trajectory::new(c, vec![a.clone(), b.clone()]).unwrap();
        let q = traj.query(0.02).unwrap();
        assert!((q.position - 0.5 * (a.position + b.position)).norm() < 1e-15);
        assert!((q.velocity - a.velocity).norm() < 1e-14);
    }

    #[test]
    fn constant_spin_midpoint_on_geodesic() {
        let c = full();
        let l = c.layout();
        let mut a = KnotState::identity(0.0, &l);
        a.rotation = so3::exp(&Vector3::new(0.3, 0.2, -0.1));
        a.omega = Vector3::new(0.5, -1.0, 2.0);
        let b = propagate(&a, 0.1, &c).unwrap();
        let traj = Trajectory::new(c, vec![a.clone(), b]).unwrap();
        let q = traj.query(0.05).unwrap();
        let expect = a.rotation * so3::exp(&(a.omega * 0.05));
        assert!((q.rotation.matrix() - expect.matrix()).abs().max() < 1e-12);
        assert!((q.omega - a.omega).norm() < 1e-12);
    }

    #[test]
    fn sensor_pose_composition() {
        let c = full();
        let mut traj = Trajectory::stationary(c, 0.0, 0.04, 1).unwrap();
        let mut ext = Extrinsics {
            lidar: vec![RigidTransform::identity()],
            ..Default::default()
        };
        let pose = traj.sensor_pose(0.01, &ext, 0).unwrap();
        assert_eq!(pose, traj.query(0.01).unwrap().pose());
        ext.lidar.push(RigidTransform::new(
            Rotation::identity(),
            Vector3::new(0.1, 0.0, 0.0),
        ));
        assert_eq!(
            traj.sensor_pose(0.01, &ext, 1).unwrap().translation,
            Vector3::new(0.1, 0.0, 0.0)
        );
        assert!(matches!(
            traj.sensor_pose(0.01, &ext, 2),
            Err(Error::UnknownSensor { .. })
        ));

        let mut knots = traj.knots().to_vec();
        knots[0].rotation = so3::exp(&Vector3::new(0.2, -0.4, 1.0));
        knots[0].position = Vector3::new(1.0, 2.0, 3.0);
        traj.set_knots(knots);
        let e = RigidTransform::new(
            so3::exp(&Vector3::new(-0.1, 0.3, 0.2)),
            Vector3::new(0.1, -0.2, 0.05),
        );
        ext.lidar[0] = e;
        let got = traj.sensor_pose(0.0, &ext, 0).unwrap().to_matrix();
        let dense = traj.query(0.0).unwrap().pose().to_matrix() * e.to_matrix();
        assert!((got - dense).abs().max() < 1e-14);
    }

    #[test]
    fn retract_and_difference_are_inverse() {
        let c = full();
        let l = c.layout();
        let mut a = KnotState::identity(0.0, &l);
        a.rotation = so3::exp(&Vector3::new(0.3, -0.2, 0.4));
        a.accel_bias[0] = Vector3::new(0.1, 0.2, 0.3);
        let delta = DVector::from_fn(l.dim, |i, _| 0.01 * (i as f64 - 7.0));
        let b = a.retract(&l, delta.as_view());
        let back = b.local_difference(&a, &l);
        assert!((back - delta).norm() < 1e-12);
    }

    #[test]
    fn initialization_from_stationary_accel() {
        let c = full();
        let ext = Extrinsics {
            lidar: vec![RigidTransform::identity()],
            gyro: vec![Rotation::identity()],
            accel: vec![Rotation::identity()],
        };
        let samples: Vec<ImuSample> = (0..60)
            .map(|i| ImuSample::new(i as f64 * 0.005, 0, Vector3::new(0.0, 0.0, 9.81)))
            .collect();
        let w = WindowConfig {
            t0: 0.0,
            interval: 0.04,
            segments: 3,
            init_duration: 0.3,
        };
        let init = initialize(&c, &w, &samples, &ext, &InitialSigmas::default()).unwrap();
        assert!((init.gravity.0 - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
        assert!(!init.moving_start);
        assert_eq!(init.trajectory.knots().len(), 4);
        assert!(init
            .trajectory
            .knots()
            .iter()
            .all(|k| k.accel_bias[0] == Vector3::zeros()));

        let none = initialize(&c, &w, &[], &ext, &InitialSigmas::default()).unwrap();
        assert_eq!(none.gravity, Gravity::default());
        assert_eq!(none.trajectory.knots()[0], none.prior_mean);
    }
}
