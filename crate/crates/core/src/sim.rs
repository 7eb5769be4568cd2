//! Synthetic scenarios: analytic truth trajectories, plane worlds, sensor
//! sampling with noise, and fault injection.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::factors::{ImuSample, LidarPoint};
use crate::so3::{self, Rotation};
use crate::trajectory::{rotation_from_rpy, Gravity, RigidTransform};

pub type Vec3 = [f64; 3];

#[inline]
pub fn v3(a: Vec3) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Pose and derivatives of the body at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthState {
    pub t: f64,
    pub rotation: Rotation,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl TruthState {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.position)
    }
}

/// Time warp that starts at rest: zero for `t < hold`, a raised-cosine rate
/// ramp over `ramp` seconds, then unit rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    pub hold: f64,
    pub ramp: f64,
}

impl Warp {
    /// `(s, ṡ, s̈)` at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let u = t - self.hold;
        if u < 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if self.ramp <= 0.0 {
            return (u, 1.0, 0.0);
        }
        if u < self.ramp {
            let w = PI / self.ramp;
            let s = 0.5 * (u - (w * u).sin() / w);
            let ds = 0.5 * (1.0 - (w * u).cos());
            let dds = 0.5 * w * (w * u).sin();
            (s, ds, dds)
        } else {
            (0.5 * self.ramp + (u - self.ramp), 1.0, 0.0)
        }
    }
}

fn default_hold() -> f64 {
    1.0
}

fn default_ramp() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthTrajectory {
    Stationary {
        #[serde(default)]
        position: Vec3,
        #[serde(default)]
        rpy: Vec3,
    },
    Line {
        #[serde(default)]
        start: Vec3,
        velocity: Vec3,
        #[serde(default)]
        rpy: Vec3,
        #[serde(default = "default_hold")]
        hold: f64,
        #[serde(default = "default_ramp")]
        ramp: f64,
    },
    Spin {
        axis: Vec3,
        /// Steady-state rate, rad/s.
        rate: f64,
        #[serde(default)]
        position: Vec3,
        #[serde(default = "default_hold")]
        hold: f64,
        #[serde(default = "default_ramp")]
        ramp: f64,
    },
    /// Lemniscate `x = A sin σ, y = (B/2) sin 2σ` with a gentle attitude wobble.
    FigureEight {
        length: f64,
        width: f64,
        period: f64,
        #[serde(default)]
        height: f64,
        #[serde(default)]
        yaw_amplitude: f64,
        #[serde(default)]
        roll_amplitude: f64,
        #[serde(default)]
        pitch_amplitude: f64,
        #[serde(default = "default_hold")]
        hold: f64,
        #[serde(default = "default_ramp")]
        ramp: f64,
    },
    /// Cubic Hermite (Catmull-Rom tangents) through timed waypoints, at rest
    /// at both ends, constant attitude.
    Waypoints {
        times: Vec<f64>,
        positions: Vec<Vec3>,
        #[serde(default)]
        rpy: Vec3,
    },
}

impl TruthTrajectory {
    /// A figure-eight that fits inside the default corner world.
    pub fn default_figure_eight() -> Self {
        TruthTrajectory::FigureEight {
            length: 3.0,
            width: 2.0,
            period: 12.0,
            height: 0.0,
            yaw_amplitude: 0.6,
            roll_amplitude: 0.1,
            pitch_amplitude: 0.1,
            hold: 1.0,
            ramp: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("truth: {m}")));
        match self {
            TruthTrajectory::Line { hold, ramp, .. }
            | TruthTrajectory::Spin { hold, ramp, .. }
            | TruthTrajectory::FigureEight { hold, ramp, .. }
                if *hold < 0.0 || *ramp < 0.0 =>
            {
                bad("hold and ramp must be non-negative")
            }
            TruthTrajectory::Spin { axis, .. } if v3(*axis).norm() == 0.0 => bad("spin axis is zero"),
            TruthTrajectory::FigureEight { period, .. } if !(*period > 0.0) => {
                bad("figure-eight period must be positive")
            }
            TruthTrajectory::Waypoints { times, positions, .. } => {
                if times.len() != positions.len() || times.len() < 2 {
                    return bad("waypoints need matching times/positions, at least two");
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("waypoint times must increase");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn state(&self, t: f64) -> TruthState {
        let zero = Vector3::zeros();
        match self {
            TruthTrajectory::Stationary { position, rpy } => TruthState {
                t,
                rotation: rotation_from_rpy(rpy[0], rpy[1], rpy[2]),
                omega: zero,
                position: v3(*position),
                velocity: zero,
                acceleration: zero,
            },
            TruthTrajectory::Line {
                start,
                velocity,
                rpy,
                hold,
                ramp,
            } => {
                let (s, ds, dds) = Warp {
                    hold: *hold,
                    ramp: *ramp,
                }
                .eval(t);
                let v = v3(*velocity);
                TruthState {
                    t,
                    rotation: rotation_from_rpy(rpy[0], rpy[1], rpy[2]),
                    omega: zero,
                    position: v3(*start) + v * s,
                    velocity: v * ds,
                    acceleration: v * dds,
                }
            }
            TruthTrajectory::Spin {
                axis,
                rate,
                position,
                hold,
                ramp,
            } => {
                let (s, ds, _) = Warp {
                    hold: *hold,
                    ramp: *ramp,
                }
                .eval(t);
                let n = v3(*axis).normalize();
                TruthState {
                    t,
                    rotation: so3::exp(&(n * (*rate * s))),
                    omega: n * (*rate * ds),
                    position: v3(*position),
                    velocity: zero,
                    acceleration: zero,
                }
            }
            TruthTrajectory::FigureEight {
                length,
                width,
                period,
                height,
                yaw_amplitude,
                roll_amplitude,
                pitch_amplitude,
                hold,
                ramp,
            } => {
                let (s, ds, dds) = Warp {
                    hold: *hold,
                    ramp: *ramp,
                }
                .eval(t);
                let k = 2.0 * PI / period;
                let (sg, dsg, ddsg) = (k * s, k * ds, k * dds);
                let (a, b) = (*length, 0.5 * width);
                let (s1, c1) = sg.sin_cos();
                let (s2, c2) = (2.0 * sg).sin_cos();
                let position = Vector3::new(a * s1, b * s2, *height);
                let velocity = Vector3::new(a * c1 * dsg, 2.0 * b * c2 * dsg, 0.0);
                let acceleration = Vector3::new(
                    -a * s1 * dsg * dsg + a * c1 * ddsg,
                    -4.0 * b * s2 * dsg * dsg + 2.0 * b * c2 * ddsg,
                    0.0,
                );
                // roll = φ_a sin 2σ, pitch = θ_a sin σ, yaw = ψ_a sin σ
                let (phi, dphi) = (roll_amplitude * s2, roll_amplitude * 2.0 * c2 * dsg);
                let (theta, dtheta) = (pitch_amplitude * s1, pitch_amplitude * c1 * dsg);
                let (psi, dpsi) = (yaw_amplitude * s1, yaw_amplitude * c1 * dsg);
                let omega = Vector3::new(
                    dphi - dpsi * theta.sin(),
                    dtheta * phi.cos() + dpsi * theta.cos() * phi.sin(),
                    -dtheta * phi.sin() + dpsi * theta.cos() * phi.cos(),
                );
                TruthState {
                    t,
                    rotation: rotation_from_rpy(phi, theta, psi),
                    omega,
                    position,
                    velocity,
                    acceleration,
                }
            }
            TruthTrajectory::Waypoints {
                times,
                positions,
                rpy,
            } => {
                let (p, v, a) = hermite_waypoints(times, positions, t);
                TruthState {
                    t,
                    rotation: rotation_from_rpy(rpy[0], rpy[1], rpy[2]),
                    omega: zero,
                    position: p,
                    velocity: v,
                    acceleration: a,
                }
            }
        }
    }
}

fn hermite_waypoints(
    times: &[f64],
    positions: &[Vec3],
    t: f64,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = times.len();
    let zero = Vector3::zeros();
    if t <= times[0] {
        return (v3(positions[0]), zero, zero);
    }
    if t >= times[n - 1] {
        return (v3(positions[n - 1]), zero, zero);
    }
    let tangent = |i: usize| -> Vector3<f64> {
        if i == 0 || i == n - 1 {
            zero
        } else {
            (v3(positions[i + 1]) - v3(positions[i - 1])) / (times[i + 1] - times[i - 1])
        }
    };
    let i = times.partition_point(|&x| x <= t) - 1;
    let h = times[i + 1] - times[i];
    let u = (t - times[i]) / h;
    let (p0, p1) = (v3(positions[i]), v3(positions[i + 1]));
    let (m0, m1) = (tangent(i) * h, tangent(i + 1) * h);
    let (u2, u3) = (u * u, u * u * u);
    let p = (2.0 * u3 - 3.0 * u2 + 1.0) * p0
        + (u3 - 2.0 * u2 + u) * m0
        + (-2.0 * u3 + 3.0 * u2) * p1
        + (u3 - u2) * m1;
    let dp = (6.0 * u2 - 6.0 * u) * p0
        + (3.0 * u2 - 4.0 * u + 1.0) * m0
        + (-6.0 * u2 + 6.0 * u) * p1
        + (3.0 * u2 - 2.0 * u) * m1;
    let ddp = (12.0 * u - 6.0) * p0 + (6.0 * u - 4.0) * m0 + (-12.0 * u + 6.0) * p1 + (6.0 * u - 2.0) * m1;
    (p, dp / h, ddp / (h * h))
}

/// A finite rectangle `corner + u·edge_u + v·edge_v`, `u, v ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanePatch {
    pub corner: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
}

impl PlanePatch {
    pub fn normal(&self) -> Vector3<f64> {
        v3(self.edge_u).cross(&v3(self.edge_v)).normalize()
    }

    pub fn validate(&self) -> Result<()> {
        let (u, v) = (v3(self.edge_u), v3(self.edge_v));
        if u.norm() == 0.0 || v.norm() == 0.0 {
            return Err(Error::Config("plane patch has a zero-length edge".into()));
        }
        if u.dot(&v).abs() > 1e-9 * u.norm() * v.norm() {
            return Err(Error::Config("plane patch edges must be orthogonal".into()));
        }
        Ok(())
    }

    /// Ray parameter of the hit, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let c = v3(self.corner);
        let s = n.dot(&(c - origin)) / denom;
        if s <= 0.0 {
            return None;
        }
        let d = origin + dir * s - c;
        let (u, v) = (v3(self.edge_u), v3(self.edge_v));
        let a = d.dot(&u) / u.norm_squared();
        let b = d.dot(&v) / v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSpec {
    /// Floor plus two orthogonal walls.
    ThreePlaneCorner {
        #[serde(default = "default_floor")]
        floor: f64,
        #[serde(default = "default_wall_x")]
        wall_x: f64,
        #[serde(default = "default_wall_y")]
        wall_y: f64,
    },
    /// Axis-aligned box centred at the origin.
    BoxRoom {
        half_extents: Vec3,
    },
    /// A single large floor.
    SinglePlane {
        #[serde(default = "default_floor")]
        floor: f64,
    },
    Patches {
        patches: Vec<PlanePatch>,
    },
}

fn default_floor() -> f64 {
    -1.5
}
fn default_wall_x() -> f64 {
    8.0
}
fn default_wall_y() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWorld {
    pub patches: Vec<PlanePatch>,
}

impl PlaneWorld {
    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        let patches = match spec {
            WorldSpec::ThreePlaneCorner {
                floor,
                wall_x,
                wall_y,
            } => {
                let (f, x, y) = (*floor, *wall_x, *wall_y);
                let lo = -40.0;
                let top = f + 12.0;
                vec![
                    PlanePatch {
                        corner: [lo, lo, f],
                        edge_u: [x - lo, 0.0, 0.0],
                        edge_v: [0.0, y - lo, 0.0],
                    },
                    PlanePatch {
                        corner: [x, lo, f],
                        edge_u: [0.0, y - lo, 0.0],
                        edge_v: [0.0, 0.0, top - f],
                    },
                    PlanePatch {
                        corner: [lo, y, f],
                        edge_u: [x - lo, 0.0, 0.0],
                        edge_v: [0.0, 0.0, top - f],
                    },
                ]
            }
            WorldSpec::BoxRoom { half_extents } => {
                let [a, b, c] = *half_extents;
                vec![
                    PlanePatch {
                        corner: [-a, -b, -c],
                        edge_u: [2.0 * a, 0.0, 0.0],
                        edge_v: [0.0, 2.0 * b, 0.0],
                    },
                    PlanePatch {
                        corner: [-a, -b, c],
                        edge_u: [2.0 * a, 0.0, 0.0],
                        edge_v: [0.0, 2.0 * b, 0.0],
                    },
                    PlanePatch {
                        corner: [-a, -b, -c],
                        edge_u: [2.0 * a, 0.0, 0.0],
                        edge_v: [0.0, 0.0, 2.0 * c],
                    },
                    PlanePatch {
                        corner: [-a, b, -c],
                        edge_u: [2.0 * a, 0.0, 0.0],
                        edge_v: [0.0, 0.0, 2.0 * c],
                    },
                    PlanePatch {
                        corner: [-a, -b, -c],
                        edge_u: [0.0, 2.0 * b, 0.0],
                        edge_v: [0.0, 0.0, 2.0 * c],
                    },
                    PlanePatch {
                        corner: [a, -b, -c],
                        edge_u: [0.0, 2.0 * b, 0.0],
                        edge_v: [0.0, 0.0, 2.0 * c],
                    },
                ]
            }
            WorldSpec::SinglePlane { floor } => vec![PlanePatch {
                corner: [-100.0, -100.0, *floor],
                edge_u: [200.0, 0.0, 0.0],
                edge_v: [0.0, 200.0, 0.0],
            }],
            WorldSpec::Patches { patches } => patches.clone(),
        };
        if patches.is_empty() {
            return Err(Error::Config("world has no planes".into()));
        }
        for p in &patches {
            p.validate()?;
        }
        Ok(Self { patches })
    }

    /// Nearest hit along the ray: `(range, patch index)`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|s| (s, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScanPattern {
    /// Mechanical spinning LiDAR: each azimuth column fires all rings at
    /// once, columns sweep the full circle over one scan period.
    Spinning {
        rings: usize,
        columns: usize,
        /// Lowest and highest ring elevation, degrees.
        elevation: [f64; 2],
    },
    /// Non-repetitive pattern: uniformly random directions inside a cone
    /// around the sensor x axis, random times within the scan.
    Random {
        points_per_scan: usize,
        /// Cone half angle, degrees (180 covers the sphere).
        half_angle: f64,
    },
}

impl ScanPattern {
    pub fn points_per_scan(&self) -> usize {
        match self {
            ScanPattern::Spinning { rings, columns, .. } => rings * columns,
            ScanPattern::Random { points_per_scan, .. } => *points_per_scan,
        }
    }

    /// Directions and normalized firing times (in `[0, 1)`) for one scan.
    fn scan(&self, rng: &mut ChaCha8Rng) -> Vec<(f64, Vector3<f64>)> {
        match self {
            ScanPattern::Spinning {
                rings,
                columns,
                elevation,
            } => {
                let (lo, hi) = (elevation[0].to_radians(), elevation[1].to_radians());
                let mut out = Vec::with_capacity(rings * columns);
                for c in 0..*columns {
                    let frac = c as f64 / *columns as f64;
                    let az = 2.0 * PI * frac;
                    for r in 0..*rings {
                        let el = if *rings == 1 {
                            0.5 * (lo + hi)
                        } else {
                            lo + (hi - lo) * r as f64 / (*rings - 1) as f64
                        };
                        out.push((
                            frac,
                            Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()),
                        ));
                    }
                }
                out
            }
            ScanPattern::Random {
                points_per_scan,
                half_angle,
            } => {
                let cos_max = half_angle.to_radians().cos();
                let mut out: Vec<(f64, Vector3<f64>)> = (0..*points_per_scan)
                    .map(|_| {
                        let z: f64 = rng.random_range(cos_max..=1.0);
                        let phi: f64 = rng.random_range(0.0..2.0 * PI);
                        let r = (1.0 - z * z).max(0.0).sqrt();
                        let frac: f64 = rng.random_range(0.0..1.0);
                        (frac, Vector3::new(z, r * phi.cos(), r * phi.sin()))
                    })
                    .collect();
                out.sort_by(|a, b| a.0.total_cmp(&b.0));
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    pub rate: f64,
    pub pattern: ScanPattern,
    pub extrinsic: RigidTransform,
    pub range_noise: f64,
    pub min_range: f64,
    pub max_range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuSpec {
    pub rate: f64,
    pub extrinsic: Rotation,
    pub noise: f64,
    /// Constant bias in the body-aligned frame of the model.
    pub bias: Vector3<f64>,
    /// Components with magnitude at or above this are clamped and flagged.
    pub saturation: f64,
}

/// Deterministic per-sensor random stream.
pub fn sensor_rng(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind * 1024 + index as u64);
    rng
}

/// Casts every ray of the scans that start in `[t0, t1)` from the true
/// sensor pose at the ray's own firing time.
pub fn sample_lidar(
    world: &PlaneWorld,
    truth: &TruthTrajectory,
    spec: &LidarSpec,
    sensor: usize,
    t0: f64,
    t1: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<LidarPoint> {
    let period = 1.0 / spec.rate;
    let noise = Normal::new(0.0, spec.range_noise.max(0.0)).expect("finite noise");
    let mut out = Vec::new();
    let scans = ((t1 - t0) * spec.rate).round().max(0.0) as usize;
    for k in 0..scans {
        let ts = t0 + k as f64 * period;
        for (frac, dir) in spec.pattern.scan(rng) {
            let t = ts + frac * period;
            if t >= t1 {
                continue;
            }
            let pose = truth.state(t).pose().compose(&spec.extrinsic);
            let world_dir = pose.rotation * dir;
            let Some((range, _)) = world.cast(&pose.translation, &world_dir) else {
                continue;
            };
            if range < spec.min_range || range > spec.max_range {
                continue;
            }
            let r = if spec.range_noise > 0.0 {
                range + noise.sample(rng)
            } else {
                range
            };
            out.push(LidarPoint::new(t, sensor, dir * r));
        }
    }
    out
}

fn clamp_flag(v: Vector3<f64>, limit: f64) -> (Vector3<f64>, bool) {
    let mut sat = false;
    let c = v.map(|x| {
        if x.abs() >= limit {
            sat = true;
            limit.copysign(x)
        } else {
            x
        }
    });
    (c, sat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImuKind {
    Gyro,
    Accel,
}

/// IMU readings at `spec.rate` over `[t0, t1)`, generated from the inverse
/// of the measurement models.
#[allow(clippy::too_many_arguments)]
pub fn sample_imu(
    truth: &TruthTrajectory,
    spec: &ImuSpec,
    kind: ImuKind,
    sensor: usize,
    gravity: &Gravity,
    t0: f64,
    t1: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ImuSample> {
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let n = ((t1 - t0) * spec.rate).round().max(0.0) as usize;
    let rt = spec.extrinsic.inverse();
    (0..n)
        .map(|i| {
            let t = t0 + i as f64 / spec.rate;
            let s = truth.state(t);
            let clean = match kind {
                ImuKind::Gyro => rt * (s.omega + spec.bias),
                ImuKind::Accel => rt * (s.rotation.inverse() * (s.acceleration + gravity.0) + spec.bias),
            };
            let noisy = if spec.noise > 0.0 {
                clean + Vector3::from_fn(|_, _| noise.sample(rng))
            } else {
                clean
            };
            let (value, saturated) = clamp_flag(noisy, spec.saturation);
            ImuSample {
                t,
                sensor,
                value,
                saturated,
            }
        })
        .collect()
}

/// All sensor streams of one scenario, each sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Streams {
    pub lidar: Vec<LidarPoint>,
    pub gyro: Vec<ImuSample>,
    pub accel: Vec<ImuSample>,
}

impl Streams {
    pub fn sort(&mut self) {
        let key = |t: f64, s: usize| (t, s);
        self.lidar
            .sort_by(|a, b| key(a.t, a.sensor).partial_cmp(&key(b.t, b.sensor)).unwrap());
        self.gyro
            .sort_by(|a, b| key(a.t, a.sensor).partial_cmp(&key(b.t, b.sensor)).unwrap());
        self.accel
            .sort_by(|a, b| key(a.t, a.sensor).partial_cmp(&key(b.t, b.sensor)).unwrap());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Lidar,
    Gyro,
    Accel,
    /// Both the gyroscope and the accelerometer with this index.
    Imu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    Dropout,
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub sensor: SensorKind,
    #[serde(default)]
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub mode: FaultMode,
    /// Clamp level for `saturate` faults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<f64>,
}

impl Fault {
    fn covers(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    fn applies_to(&self, kind: SensorKind, index: usize) -> bool {
        index == self.index
            && (self.sensor == kind
                || (self.sensor == SensorKind::Imu && matches!(kind, SensorKind::Gyro | SensorKind::Accel)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSchedule {
    #[serde(default)]
    pub faults: Vec<Fault>,
}

/// What [`apply_faults`] changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FaultReport {
    pub lidar_dropped: usize,
    pub gyro_dropped: usize,
    pub accel_dropped: usize,
    pub gyro_saturated: usize,
    pub accel_saturated: usize,
}

impl FaultSchedule {
    pub fn validate(&self, duration: f64) -> Result<()> {
        for f in &self.faults {
            if !(f.start < f.end) || f.start < 0.0 || f.end > duration + 1e-9 {
                return Err(Error::Config(format!(
                    "fault interval [{}, {}) must be non-empty and inside [0, {duration}]",
                    f.start, f.end
                )));
            }
            if f.mode == FaultMode::Saturate
                && (!f.limit.is_some_and(|l| l > 0.0) || f.sensor == SensorKind::Lidar)
            {
                return Err(Error::Config(
                    "saturation faults need an IMU sensor and a positive limit".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Dropouts delete samples (overlapping windows act as their union);
/// saturation clamps and flags IMU samples.
pub fn apply_faults(streams: &Streams, schedule: &FaultSchedule) -> (Streams, FaultReport) {
    let mut report = FaultReport::default();
    let dropped = |kind: SensorKind, idx: usize, t: f64| {
        schedule
            .faults
            .iter()
            .any(|f| f.mode == FaultMode::Dropout && f.applies_to(kind, idx) && f.covers(t))
    };
    let lidar: Vec<LidarPoint> = streams
        .lidar
        .iter()
        .filter(|p| !dropped(SensorKind::Lidar, p.sensor, p.t))
        .copied()
        .collect();
    report.lidar_dropped = streams.lidar.len() - lidar.len();

    let process = |samples: &[ImuSample], kind: SensorKind, dropped_n: &mut usize, sat_n: &mut usize| {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            if dropped(kind, s.sensor, s.t) {
                *dropped_n += 1;
                continue;
            }
            let mut s = *s;
            for f in &schedule.faults {
                if let (FaultMode::Saturate, Some(limit)) = (f.mode, f.limit) {
                    if f.applies_to(kind, s.sensor) && f.covers(s.t) {
                        let (v, sat) = clamp_flag(s.value, limit);
                        s.value = v;
                        if sat && !s.saturated {
                            *sat_n += 1;
                        }
                        s.saturated |= sat;
                    }
                }
            }
            out.push(s);
        }
        out
    };
    let (mut gd, mut gs, mut ad, mut as_) = (0, 0, 0, 0);
    let gyro = process(&streams.gyro, SensorKind::Gyro, &mut gd, &mut gs);
    let accel = process(&streams.accel, SensorKind::Accel, &mut ad, &mut as_);
    report.gyro_dropped = gd;
    report.gyro_saturated = gs;
    report.accel_dropped = ad;
    report.accel_saturated = as_;
    (Streams { lidar, gyro, accel }, report)
}
