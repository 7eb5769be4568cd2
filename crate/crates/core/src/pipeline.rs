//! End-to-end scenario runs: simulate sensor streams, run the sliding-window
//! estimator over them and score the result.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::factors::{bucket_measurements, ImuSample, LidarPoint, Stamped};
use crate::io::{self, StampedPose};
use crate::metrics::{self, AteReport};
use crate::sim::{
    apply_faults, sample_imu, sample_lidar, sensor_rng, FaultReport, ImuKind, PlaneWorld, Streams,
};
use crate::solver::{gauss_newton, FactorCounts, MarginalPrior, WindowProblem};
use crate::trajectory::{initialize, log_warning, to_nanos, Gravity, KnotState, Trajectory, WindowConfig};
use crate::voxel_map::VoxelMap;

/// Rate of the exported ground truth, Hz.
pub const TRUTH_RATE: f64 = 200.0;
pub const RATES_FILE: &str = "rates.txt";
pub const TRUTH_RATES_FILE: &str = "truth_rates.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.tum";
pub const REPORT_FILE: &str = "report.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const SIM_REPORT_FILE: &str = "simulation.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub streams: Streams,
    pub truth: Vec<StampedPose>,
    /// Body angular velocity at the truth stamps.
    pub truth_rates: Vec<(f64, Vector3<f64>)>,
    pub report: SimulationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub duration: f64,
    pub lidar_points: usize,
    pub gyro_samples: usize,
    pub accel_samples: usize,
    pub faults: FaultReport,
    pub faults_applied: usize,
}

/// Generates every configured stream over `[0, duration)`, applies the fault
/// schedule and samples the truth at [`TRUTH_RATE`]. Deterministic in the
/// seed.
pub fn simulate(config: &ScenarioConfig) -> Result<Simulation> {
    config.validate()?;
    let world = PlaneWorld::from_spec(&config.world)?;
    let truth_traj = &config.trajectory;
    let gravity = Gravity(config.gravity_vector());
    let (t0, t1) = (0.0, config.duration);
    let mut streams = Streams::default();
    for (j, l) in config.lidar.iter().enumerate() {
        let mut rng = sensor_rng(config.seed, 0, j);
        streams
            .lidar
            .extend(sample_lidar(&world, truth_traj, &l.spec(), j, t0, t1, &mut rng));
    }
    for (j, g) in config.gyro.iter().enumerate() {
        let mut rng = sensor_rng(config.seed, 1, j);
        streams.gyro.extend(sample_imu(
            truth_traj,
            &g.spec(),
            ImuKind::Gyro,
            j,
            &gravity,
            t0,
            t1,
            &mut rng,
        ));
    }
    for (j, a) in config.accel.iter().enumerate() {
        let mut rng = sensor_rng(config.seed, 2, j);
        streams.accel.extend(sample_imu(
            truth_traj,
            &a.spec(),
            ImuKind::Accel,
            j,
            &gravity,
            t0,
            t1,
            &mut rng,
        ));
    }
    streams.sort();
    let (streams, faults) = apply_faults(&streams, &config.faults);

    let n = (config.duration * TRUTH_RATE).round() as usize;
    let mut truth = Vec::with_capacity(n + 1);
    let mut truth_rates = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 / TRUTH_RATE;
        let s = truth_traj.state(t);
        truth.push(StampedPose {
            t,
            rotation: s.rotation,
            position: s.position,
        });
        truth_rates.push((t, s.omega));
    }
    let report = SimulationReport {
        seed: config.seed,
        duration: config.duration,
        lidar_points: streams.lidar.len(),
        gyro_samples: streams.gyro.len(),
        accel_samples: streams.accel.len(),
        faults,
        faults_applied: config.faults.faults.len(),
    };
    Ok(Simulation {
        streams,
        truth,
        truth_rates,
        report,
    })
}

/// Writes the streams, `truth.tum`, `truth_rates.txt` and `simulation.json`.
pub fn write_simulation(dir: &Path, sim: &Simulation) -> Result<()> {
    io::save_streams(dir, &sim.streams)?;
    io::save_tum(&dir.join(io::TRUTH_FILE), &sim.truth)?;
    io::save_rates(&dir.join(TRUTH_RATES_FILE), &sim.truth_rates)?;
    write_json(&dir.join(SIM_REPORT_FILE), &sim.report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Statistics of one optimized window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRecord {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub factors: FactorCounts,
    pub lidar_points: usize,
    pub clamped_eigenvalues: usize,
    pub map_points: usize,
    /// Wall time of this window, seconds.
    pub wall_time: f64,
}

/// An interval in which a sensor delivered nothing for longer than five
/// nominal periods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamGap {
    pub sensor: &'static str,
    pub index: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub threads: usize,
    /// Span covered by the estimate, seconds.
    pub duration: f64,
    pub windows: usize,
    pub diverged_windows: usize,
    pub total_iterations: usize,
    pub factors: FactorCounts,
    /// Sum of per-window wall times, seconds.
    pub window_wall_time: f64,
    /// Whole run including setup and export, seconds.
    pub wall_time: f64,
    pub gravity: [f64; 3],
    pub moving_start: bool,
    pub saturated_samples: usize,
    pub gaps: Vec<StreamGap>,
    pub map_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate: Option<AteReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_error: Option<RateError>,
}

/// Angular-rate tracking error against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateError {
    pub samples: usize,
    /// RMS of `|ω̂ − ω|`, rad/s.
    pub rmse: f64,
    /// `rmse` divided by the RMS of `|ω|`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Every knot of the run, oldest first.
    pub knots: Vec<KnotState>,
    /// Poses at the output rate and at every knot time, sorted.
    pub poses: Vec<StampedPose>,
    /// Body angular velocity at the pose stamps.
    pub rates: Vec<(f64, Vector3<f64>)>,
    pub windows: Vec<WindowRecord>,
    pub report: RunReport,
}

impl Estimate {
    /// Writes `trajectory.tum`, `rates.txt`, `report.json` and
    /// `diagnostics.jsonl` (one window record per line).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::save_tum(&dir.join(TRAJECTORY_FILE), &self.poses)?;
        io::save_rates(&dir.join(RATES_FILE), &self.rates)?;
        write_json(&dir.join(REPORT_FILE), &self.report)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(DIAGNOSTICS_FILE))?);
        for r in &self.windows {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Keeps the first point of each `(sensor, cell)` in every knot interval.
pub fn downsample(points: &[LidarPoint], t0: f64, interval: f64, leaf: f64) -> Vec<LidarPoint> {
    if leaf <= 0.0 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(points.len() / 4);
    let mut seen: HashSet<(i64, usize, [i64; 3])> = HashSet::new();
    let mut current = i64::MIN;
    for p in points {
        let slot = ((p.t - t0) / interval).floor() as i64;
        if slot != current {
            seen.clear();
            current = slot;
        }
        let cell = [
            (p.point.x / leaf).floor() as i64,
            (p.point.y / leaf).floor() as i64,
            (p.point.z / leaf).floor() as i64,
        ];
        if seen.insert((slot, p.sensor, cell)) {
            out.push(*p);
        }
    }
    out
}

fn check_index(kind: &'static str, count: usize, mut indices: impl Iterator<Item = usize>) -> Result<()> {
    match indices.find(|&i| i >= count) {
        Some(index) => Err(Error::UnknownSensor { kind, index }),
        None => Ok(()),
    }
}

fn check_sensors(config: &ScenarioConfig, streams: &Streams) -> Result<()> {
    check_index(
        "lidar",
        config.lidar.len(),
        streams.lidar.iter().map(|p| p.sensor),
    )?;
    check_index("gyro", config.gyro.len(), streams.gyro.iter().map(|s| s.sensor))?;
    check_index(
        "accel",
        config.accel.len(),
        streams.accel.iter().map(|s| s.sensor),
    )
}

fn find_gaps(
    kind: &'static str,
    rates: &[f64],
    stamps: impl Fn(usize) -> Vec<f64>,
    span: (f64, f64),
) -> Vec<StreamGap> {
    let mut gaps = Vec::new();
    for (index, rate) in rates.iter().enumerate() {
        let limit = 5.0 / rate;
        let mut ts = stamps(index);
        ts.insert(0, span.0 - 1.0 / rate);
        ts.push(span.1 + 1.0 / rate);
        for w in ts.windows(2) {
            if w[1] - w[0] > limit {
                gaps.push(StreamGap {
                    sensor: kind,
                    index,
                    start: w[0].max(span.0),
                    end: w[1].min(span.1),
                });
            }
        }
    }
    gaps
}

fn stream_gaps(config: &ScenarioConfig, streams: &Streams, span: (f64, f64)) -> Vec<StreamGap> {
    let of = |v: &[ImuSample], j: usize| v.iter().filter(|s| s.sensor == j).map(|s| s.t).collect();
    let lidar_rates: Vec<f64> = config.lidar.iter().map(|l| l.rate).collect();
    let gyro_rates: Vec<f64> = config.gyro.iter().map(|g| g.rate).collect();
    let accel_rates: Vec<f64> = config.accel.iter().map(|a| a.rate).collect();
    let mut gaps = find_gaps(
        "lidar",
        &lidar_rates,
        |j| {
            // one stamp per scan is enough to see silence
            let mut last = f64::NEG_INFINITY;
            let period = 1.0 / config.lidar[j].rate;
            streams
                .lidar
                .iter()
                .filter(|p| p.sensor == j)
                .filter(|p| {
                    let keep = p.t - last >= 0.5 * period;
                    if keep {
                        last = p.t;
                    }
                    keep
                })
                .map(|p| p.t)
                .collect()
        },
        span,
    );
    gaps.extend(find_gaps("gyro", &gyro_rates, |j| of(&streams.gyro, j), span));
    gaps.extend(find_gaps("accel", &accel_rates, |j| of(&streams.accel, j), span));
    gaps
}

fn slice<T: Stamped>(items: &[T], t0: f64, t1: f64) -> &[T] {
    let a = items.partition_point(|x| to_nanos(x.stamp()) < to_nanos(t0));
    let b = items.partition_point(|x| to_nanos(x.stamp()) < to_nanos(t1));
    &items[a..b.max(a)]
}

/// Poses and body rates at `rate` Hz plus every knot time.
pub fn sample_trajectory(traj: &Trajectory, rate: f64) -> (Vec<StampedPose>, Vec<(f64, Vector3<f64>)>) {
    let (t0, t1) = (traj.start(), traj.end());
    let mut stamps: Vec<i64> = traj.knot_stamps().to_vec();
    let n = ((t1 - t0) * rate).floor() as i64;
    let first = (t0 * rate).ceil() as i64;
    for i in first..=first + n {
        let t = i as f64 / rate;
        if t >= t0 && t <= t1 {
            stamps.push(to_nanos(t));
        }
    }
    stamps.sort_unstable();
    stamps.dedup();
    let last = traj.knots().last().expect("non-empty trajectory");
    let mut poses = Vec::with_capacity(stamps.len());
    let mut rates = Vec::with_capacity(stamps.len());
    for ns in stamps {
        let t = ns as f64 * 1e-9;
        let state = if ns >= *traj.knot_stamps().last().unwrap() {
            last.clone()
        } else {
            match traj.query(t) {
                Ok(s) => s,
                Err(_) => continue,
            }
        };
        poses.push(StampedPose {
            t,
            rotation: state.rotation,
            position: state.position,
        });
        rates.push((t, state.omega));
    }
    (poses, rates)
}

/// Runs the sliding-window estimator over `streams`. When `truth` is given
/// the report includes the ATE; `truth_rates` adds the rate error.
pub fn estimate(
    config: &ScenarioConfig,
    streams: &Streams,
    truth: Option<&[StampedPose]>,
    truth_rates: Option<&[(f64, Vector3<f64>)]>,
) -> Result<Estimate> {
    let started = Instant::now();
    config.validate()?;
    if streams.lidar.is_empty() {
        return Err(Error::MissingInput("no LiDAR points".into()));
    }
    check_sensors(config, streams)?;
    let state_cfg = config.state_config()?;
    let est = &config.estimator;
    let prior = state_cfg.hybrid_prior(&est.priors)?;
    let extrinsics = config.extrinsics();
    let noise = config.noise_model()?;
    let dt = est.interval;
    let k_segments = est.segments;

    let t_first = streams.lidar[0].t;
    let t_last = streams.lidar.last().unwrap().t;
    let lidar = downsample(&streams.lidar, t_first, dt, est.scan_voxel_size);
    let mut saturated = streams.gyro.iter().filter(|s| s.saturated).count();
    saturated += streams.accel.iter().filter(|s| s.saturated).count();

    let init = initialize(
        &state_cfg,
        &WindowConfig {
            t0: t_first,
            interval: dt,
            segments: k_segments,
            init_duration: est.init_duration,
        },
        &streams.accel,
        &extrinsics,
        &est.initial,
    )?;
    let gravity = init.gravity;
    let mut traj = init.trajectory;
    let mut marginal = MarginalPrior::from_gaussian(&init.prior_mean, &init.prior_covariance)?;

    let mut map = VoxelMap::new(config.map)?;
    let init_end = t_first + est.init_duration.max(dt);
    let first_points: Vec<Vector3<f64>> = slice(&lidar, t_first, init_end)
        .iter()
        .map(|p| extrinsics.lidar[p.sensor].apply(&p.point))
        .collect();
    map.insert(first_points.iter());

    let mut done: Vec<KnotState> = Vec::new();
    let mut windows = Vec::new();
    loop {
        let tick = Instant::now();
        let (w0, w1) = (traj.start(), traj.end());
        let (batches, _) = bucket_measurements(
            traj.knot_stamps(),
            slice(&lidar, w0, w1),
            slice(&streams.gyro, w0, w1),
            slice(&streams.accel, w0, w1),
        );
        let predicted = traj.clone();
        let mut problem = WindowProblem {
            config: state_cfg,
            prior: &prior,
            extrinsics: &extrinsics,
            gravity,
            noise: &noise,
            map: &map,
            batches: &batches,
            marginal: &marginal,
            solver: config.solver,
            correspondences: Vec::new(),
        };
        let (opt, rep) = gauss_newton(&mut problem, traj, &config.solver);
        let diverged = rep.diverged
            || opt
                .knots()
                .iter()
                .any(|k| !k.position.iter().all(|v| v.is_finite()));
        traj = if diverged {
            log_warning(&format!("window at t={w0:.3} diverged; keeping the prediction"));
            predicted
        } else {
            opt
        };
        problem.associate(&traj);
        let (_, _, factors) = problem.build(&traj)?;
        let finished = w1 >= t_last;
        let mut clamped = 0;
        let next_marginal = if finished {
            None
        } else {
            let (m, c) = problem.marginalize_first(&traj)?;
            clamped = c;
            Some(m)
        };
        let seg = traj.segment(0)?;
        let world: Vec<Vector3<f64>> = batches[0]
            .lidar
            .iter()
            .map(|p| {
                seg.pose_at(p.t)
                    .compose(&extrinsics.lidar[p.sensor])
                    .apply(&p.point)
            })
            .collect();
        windows.push(WindowRecord {
            index: windows.len(),
            t_start: w0,
            t_end: w1,
            iterations: rep.iterations,
            converged: rep.converged,
            diverged,
            initial_energy: rep.initial_energy,
            final_energy: rep.final_energy,
            factors,
            lidar_points: batches.iter().map(|b| b.lidar.len()).sum(),
            clamped_eigenvalues: clamped,
            map_points: map.len(),
            wall_time: 0.0,
        });
        map.insert(world.iter());
        let center = traj.knots()[0].position;
        map.cull(&center);
        match next_marginal {
            None => {
                for (k, _) in traj.knots().iter().enumerate().skip(1) {
                    if k + 1 < traj.knots().len() {
                        let s = traj.segment(k)?;
                        let pts: Vec<Vector3<f64>> = batches[k]
                            .lidar
                            .iter()
                            .map(|p| {
                                s.pose_at(p.t)
                                    .compose(&extrinsics.lidar[p.sensor])
                                    .apply(&p.point)
                            })
                            .collect();
                        map.insert(pts.iter());
                    }
                }
                done.extend(traj.knots().iter().cloned());
                windows.last_mut().unwrap().wall_time = tick.elapsed().as_secs_f64();
                break;
            }
            Some(m) => {
                marginal = m;
                done.push(traj.pop_front());
                traj.extend(dt)?;
            }
        }
        windows.last_mut().unwrap().wall_time = tick.elapsed().as_secs_f64();
    }

    let full = Trajectory::new(state_cfg, done)?;
    let (poses, rates) = sample_trajectory(&full, est.output_rate);
    let ate = match truth {
        Some(t) => Some(metrics::ate(&poses, t, metrics::DEFAULT_MAX_GAP)?),
        None => None,
    };
    let rate_error = truth_rates.and_then(|r| rate_error(&rates, r));
    let mut factors = FactorCounts::default();
    for w in &windows {
        factors.lidar += w.factors.lidar;
        factors.gyro += w.factors.gyro;
        factors.accel += w.factors.accel;
        factors.prior += w.factors.prior;
    }
    let span = (full.start(), full.end());
    let report = RunReport {
        seed: config.seed,
        threads: rayon::current_num_threads(),
        duration: span.1 - span.0,
        windows: windows.len(),
        diverged_windows: windows.iter().filter(|w| w.diverged).count(),
        total_iterations: windows.iter().map(|w| w.iterations).sum(),
        factors,
        window_wall_time: windows.iter().map(|w| w.wall_time).sum(),
        wall_time: started.elapsed().as_secs_f64(),
        gravity: [gravity.0.x, gravity.0.y, gravity.0.z],
        moving_start: init.moving_start,
        saturated_samples: saturated,
        gaps: stream_gaps(config, streams, span),
        map_points: map.len(),
        ate,
        rate_error,
    };
    Ok(Estimate {
        knots: full.knots().to_vec(),
        poses,
        rates,
        windows,
        report,
    })
}

/// Rate error over the estimate stamps that have a reference within 5 ms.
pub fn rate_error(est: &[(f64, Vector3<f64>)], reference: &[(f64, Vector3<f64>)]) -> Option<RateError> {
    let mut sq = 0.0;
    let mut ref_sq = 0.0;
    let mut n = 0;
    for (t, w) in est {
        let j = reference.partition_point(|r| r.0 < *t);
        let best = [j.checked_sub(1), (j < reference.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (reference[a].0 - t).abs().total_cmp(&(reference[b].0 - t).abs()))?;
        if (reference[best].0 - t).abs() > metrics::DEFAULT_MAX_GAP {
            continue;
        }
        sq += (w - reference[best].1).norm_squared();
        ref_sq += reference[best].1.norm_squared();
        n += 1;
    }
    (n > 0).then(|| {
        let rmse = (sq / n as f64).sqrt();
        let scale = (ref_sq / n as f64).sqrt();
        RateError {
            samples: n,
            rmse,
            relative: if scale > 0.0 { rmse / scale } else { f64::INFINITY },
        }
    })
}

/// ATE between two TUM files.
pub fn evaluate(estimate: &Path, truth: &Path) -> Result<AteReport> {
    let est = io::read_tum(estimate)?;
    let reference = io::read_tum(truth)?;
    metrics::ate(&est, &reference, metrics::DEFAULT_MAX_GAP)
}
