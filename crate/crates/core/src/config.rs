//! Scenario configuration: one TOML file describing the simulated world and
//! sensors, the fault schedule and every estimator setting.
//!
//! Every key is optional. Omitted keys take the values of
//! [`ScenarioConfig::default`]; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! duration = 30.0
//!
//! [trajectory]
//! kind = "figure_eight"
//! length = 3.0
//! width = 2.0
//! period = 12.0
//!
//! [world]
//! kind = "three_plane_corner"
//!
//! [[lidar]]
//! rate = 10.0
//! pattern = { kind = "spinning", rings = 16, columns = 180, elevation = [-15.0, 15.0] }
//!
//! [[gyro]]
//! saturation = 17.5
//!
//! [[accel]]
//!
//! [estimator]
//! interval = 0.04
//! segments = 3
//!
//! [[faults.faults]]
//! sensor = "gyro"
//! start = 10.0
//! end = 25.0
//! mode = "dropout"
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::NoiseModel;
use crate::sim::{
    v3, FaultSchedule, ImuSpec, LidarSpec, PlaneWorld, ScanPattern, SensorKind, TruthTrajectory, Vec3,
    WorldSpec,
};
use crate::solver::SolverConfig;
use crate::trajectory::{
    rotation_from_rpy, Extrinsics, InitialSigmas, PriorDensities, RigidTransform, RotationModel, StateConfig,
    TranslationModel, STANDARD_GRAVITY,
};
use crate::voxel_map::MapConfig;

/// Sensor mounting: translation in metres, roll/pitch/yaw in radians.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrinsicConfig {
    pub translation: Vec3,
    pub rpy: Vec3,
}

impl ExtrinsicConfig {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: rotation_from_rpy(self.rpy[0], self.rpy[1], self.rpy[2]),
            translation: v3(self.translation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub rate: f64,
    pub pattern: ScanPattern,
    pub extrinsic: ExtrinsicConfig,
    pub range_noise: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            rate: 10.0,
            pattern: ScanPattern::Spinning {
                rings: 16,
                columns: 180,
                elevation: [-15.0, 15.0],
            },
            extrinsic: ExtrinsicConfig::default(),
            range_noise: 0.02,
            min_range: 0.5,
            max_range: 100.0,
        }
    }
}

impl LidarConfig {
    pub fn spec(&self) -> LidarSpec {
        LidarSpec {
            rate: self.rate,
            pattern: self.pattern.clone(),
            extrinsic: self.extrinsic.transform(),
            range_noise: self.range_noise,
            min_range: self.min_range,
            max_range: self.max_range,
        }
    }
}

/// Gyroscope: noise in rad/s, saturation in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GyroConfig {
    pub rate: f64,
    /// Mounting rotation only; roll/pitch/yaw in radians.
    pub rpy: Vec3,
    pub noise: f64,
    pub bias: Vec3,
    pub saturation: f64,
}

impl Default for GyroConfig {
    fn default() -> Self {
        Self {
            rate: 200.0,
            rpy: [0.0; 3],
            noise: 1e-3,
            bias: [0.0; 3],
            saturation: 17.5,
        }
    }
}

/// Accelerometer: noise in m/s², saturation in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccelConfig {
    pub rate: f64,
    pub rpy: Vec3,
    pub noise: f64,
    pub bias: Vec3,
    pub saturation: f64,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            rate: 200.0,
            rpy: [0.0; 3],
            noise: 1e-2,
            bias: [0.0; 3],
            saturation: 16.0 * STANDARD_GRAVITY,
        }
    }
}

macro_rules! imu_spec {
    ($t:ty) => {
        impl $t {
            pub fn spec(&self) -> ImuSpec {
                ImuSpec {
                    rate: self.rate,
                    extrinsic: rotation_from_rpy(self.rpy[0], self.rpy[1], self.rpy[2]),
                    noise: self.noise,
                    bias: v3(self.bias),
                    saturation: self.saturation,
                }
            }
        }
    };
}
imu_spec!(GyroConfig);
imu_spec!(AccelConfig);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationPrior {
    /// `gyro` when gyroscopes are configured, otherwise `constant_velocity`.
    Auto,
    RandomWalk,
    ConstantVelocity,
    Gyro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationPrior {
    /// `accel` when accelerometers are configured, otherwise
    /// `constant_velocity`.
    Auto,
    RandomWalk,
    ConstantVelocity,
    ConstantAcceleration,
    Accel,
}

/// Measurement standard deviations used to weight the residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub lidar: f64,
    pub gyro: f64,
    pub accel: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            lidar: 0.02,
            gyro: 1e-3,
            accel: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub rotation_prior: RotationPrior,
    pub translation_prior: TranslationPrior,
    /// Knot spacing, seconds.
    pub interval: f64,
    /// Segments in the sliding window.
    pub segments: usize,
    /// Span at the start assumed stationary for gravity and the first map.
    pub init_duration: f64,
    /// Voxel-grid leaf used to thin each segment's points; 0 keeps all.
    pub scan_voxel_size: f64,
    /// Trajectory export rate, Hz.
    pub output_rate: f64,
    pub priors: PriorDensities,
    pub initial: InitialSigmas,
    pub noise: NoiseConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rotation_prior: RotationPrior::Auto,
            translation_prior: TranslationPrior::Auto,
            interval: 0.04,
            segments: 3,
            init_duration: 0.3,
            scan_voxel_size: 0.5,
            output_rate: 100.0,
            priors: PriorDensities::default(),
            initial: InitialSigmas::default(),
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Scenario length, seconds.
    pub duration: f64,
    /// Default output directory for `simulate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Specific force of gravity in the world frame (`+z` up), used by the
    /// simulator.
    pub gravity: Vec3,
    pub trajectory: TruthTrajectory,
    pub world: WorldSpec,
    pub lidar: Vec<LidarConfig>,
    pub gyro: Vec<GyroConfig>,
    pub accel: Vec<AccelConfig>,
    pub faults: FaultSchedule,
    pub estimator: EstimatorConfig,
    pub map: MapConfig,
    pub solver: SolverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 30.0,
            output: None,
            gravity: [0.0, 0.0, STANDARD_GRAVITY],
            trajectory: TruthTrajectory::default_figure_eight(),
            world: WorldSpec::ThreePlaneCorner {
                floor: -1.5,
                wall_x: 8.0,
                wall_y: 6.0,
            },
            lidar: vec![LidarConfig::default()],
            gyro: vec![GyroConfig::default()],
            accel: vec![AccelConfig::default()],
            faults: FaultSchedule::default(),
            estimator: EstimatorConfig::default(),
            map: MapConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be non-negative, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        positive("duration", self.duration)?;
        if self.lidar.is_empty() {
            return Err(Error::Config("at least one [[lidar]] is required".into()));
        }
        self.trajectory.validate()?;
        PlaneWorld::from_spec(&self.world)?;
        for (i, l) in self.lidar.iter().enumerate() {
            positive(&format!("lidar[{i}].rate"), l.rate)?;
            non_negative(&format!("lidar[{i}].range_noise"), l.range_noise)?;
            non_negative(&format!("lidar[{i}].min_range"), l.min_range)?;
            if !(l.max_range > l.min_range) {
                return Err(Error::Config(format!(
                    "lidar[{i}].max_range must exceed min_range"
                )));
            }
            if l.pattern.points_per_scan() == 0 {
                return Err(Error::Config(format!("lidar[{i}].pattern produces no points")));
            }
        }
        for (i, g) in self.gyro.iter().enumerate() {
            positive(&format!("gyro[{i}].rate"), g.rate)?;
            non_negative(&format!("gyro[{i}].noise"), g.noise)?;
            positive(&format!("gyro[{i}].saturation"), g.saturation)?;
        }
        for (i, a) in self.accel.iter().enumerate() {
            positive(&format!("accel[{i}].rate"), a.rate)?;
            non_negative(&format!("accel[{i}].noise"), a.noise)?;
            positive(&format!("accel[{i}].saturation"), a.saturation)?;
        }
        self.faults.validate(self.duration)?;
        for f in &self.faults.faults {
            let count = match f.sensor {
                SensorKind::Lidar => self.lidar.len(),
                SensorKind::Gyro => self.gyro.len(),
                SensorKind::Accel => self.accel.len(),
                SensorKind::Imu => self.gyro.len().max(self.accel.len()),
            };
            if f.index >= count {
                return Err(Error::Config(format!(
                    "fault refers to {:?} {} but only {count} configured",
                    f.sensor, f.index
                )));
            }
        }
        let e = &self.estimator;
        positive("estimator.interval", e.interval)?;
        if e.segments == 0 {
            return Err(Error::Config("estimator.segments must be at least 1".into()));
        }
        non_negative("estimator.init_duration", e.init_duration)?;
        non_negative("estimator.scan_voxel_size", e.scan_voxel_size)?;
        positive("estimator.output_rate", e.output_rate)?;
        for (n, v) in [
            ("priors.rotation", e.priors.rotation),
            ("priors.translation", e.priors.translation),
            ("priors.gyro_bias", e.priors.gyro_bias),
            ("priors.accel_bias", e.priors.accel_bias),
            ("noise.lidar", e.noise.lidar),
            ("noise.gyro", e.noise.gyro),
            ("noise.accel", e.noise.accel),
            ("initial.rotation", e.initial.rotation),
            ("initial.omega", e.initial.omega),
            ("initial.position", e.initial.position),
            ("initial.velocity", e.initial.velocity),
            ("initial.acceleration", e.initial.acceleration),
            ("initial.gyro_bias", e.initial.gyro_bias),
            ("initial.accel_bias", e.initial.accel_bias),
        ] {
            positive(&format!("estimator.{n}"), v)?;
        }
        self.state_config()?;
        self.map.validate()?;
        self.solver.validate()?;
        Ok(())
    }

    pub fn state_config(&self) -> Result<StateConfig> {
        let (ng, na) = (self.gyro.len(), self.accel.len());
        let rotation = match self.estimator.rotation_prior {
            RotationPrior::Auto if ng > 0 => RotationModel::Gyro { count: ng },
            RotationPrior::Auto | RotationPrior::ConstantVelocity => RotationModel::ConstantVelocity,
            RotationPrior::RandomWalk => RotationModel::RandomWalk,
            RotationPrior::Gyro => RotationModel::Gyro { count: ng },
        };
        let translation = match self.estimator.translation_prior {
            TranslationPrior::Auto if na > 0 => TranslationModel::Accel { count: na },
            TranslationPrior::Auto | TranslationPrior::ConstantVelocity => TranslationModel::ConstantVelocity,
            TranslationPrior::RandomWalk => TranslationModel::RandomWalk,
            TranslationPrior::ConstantAcceleration => TranslationModel::ConstantAcceleration,
            TranslationPrior::Accel => TranslationModel::Accel { count: na },
        };
        StateConfig::new(rotation, translation, self.lidar.len()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics {
            lidar: self.lidar.iter().map(|l| l.extrinsic.transform()).collect(),
            gyro: self.gyro.iter().map(|g| g.spec().extrinsic).collect(),
            accel: self.accel.iter().map(|a| a.spec().extrinsic).collect(),
        }
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let n = &self.estimator.noise;
        NoiseModel::isotropic(n.lidar, n.gyro, n.accel)
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        v3(self.gravity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Fault, FaultMode};

    #[test]
    fn empty_file_is_default() {
        let cfg = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.estimator.interval, 0.04);
        assert_eq!(cfg.estimator.segments, 3);
        assert_eq!(cfg.map.max_points_per_voxel, 20);
        assert_eq!(cfg.map.cull_radius, 100.0);
        assert_eq!(cfg.gyro[0].saturation, 17.5);
        assert_eq!(cfg.state_config().unwrap(), StateConfig::full(1, 1, 1).unwrap());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ScenarioConfig {
            seed: 99,
            ..ScenarioConfig::default()
        };
        cfg.lidar.push(LidarConfig {
            extrinsic: ExtrinsicConfig {
                translation: [0.1, 0.0, -0.2],
                rpy: [0.0, 1.2, 0.0],
            },
            pattern: ScanPattern::Random {
                points_per_scan: 500,
                half_angle: 35.0,
            },
            ..LidarConfig::default()
        });
        cfg.faults.faults.push(Fault {
            sensor: SensorKind::Gyro,
            index: 0,
            start: 1.0,
            end: 2.0,
            mode: FaultMode::Saturate,
            limit: Some(3.0),
        });
        cfg.estimator.translation_prior = TranslationPrior::ConstantAcceleration;
        let text = cfg.to_toml_string().unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ScenarioConfig::from_toml_str("seed = 1\nspeed = 2\n").unwrap_err();
        assert!(e.to_string().contains("speed"), "{e}");
        let e = ScenarioConfig::from_toml_str("[estimator]\nintervall = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("intervall"), "{e}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "duration = -1.0",
            "lidar = []",
            "[estimator]\nsegments = 0",
            "[[faults.faults]]\nsensor = \"accel\"\nindex = 3\nstart = 0.0\nend = 1.0\nmode = \"dropout\"",
            "[[faults.faults]]\nsensor = \"gyro\"\nstart = 5.0\nend = 40.0\nmode = \"dropout\"",
        ] {
            assert!(ScenarioConfig::from_toml_str(text).is_err(), "{text}");
        }
        let no_imu = "gyro = []\naccel = []\n";
        let cfg = ScenarioConfig::from_toml_str(no_imu).unwrap();
        assert_eq!(
            cfg.state_config().unwrap(),
            StateConfig::new(
                RotationModel::ConstantVelocity,
                TranslationModel::ConstantVelocity,
                1
            )
            .unwrap()
        );
        let bad = "gyro = []\n[estimator]\nrotation_prior = \"gyro\"\n";
        assert!(ScenarioConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn errors_report_location() {
        let e = ScenarioConfig::from_toml_str("seed = 1\n\n[solver]\nmax_iterations = \"x\"\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 4") || msg.contains("4:"), "{msg}");
    }
}
