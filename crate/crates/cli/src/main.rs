use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctgp::config::ScenarioConfig;
use ctgp::io;
use ctgp::pipeline::{self, TRUTH_RATES_FILE};
use ctgp::solver::configure_threads_from_env;
use ctgp::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

/// Continuous-time LiDAR-inertial trajectory estimation on synthetic scenarios.
///
/// Set CTGP_THREADS to limit the worker thread count.
#[derive(Parser)]
#[command(name = "ctgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sensor streams and ground truth from a scenario file.
    Simulate {
        config: PathBuf,
        /// Output directory; defaults to `output` in the config, then `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the sliding-window estimator over recorded streams.
    Estimate {
        config: PathBuf,
        #[arg(long)]
        streams: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absolute trajectory error between two TUM files.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidStateConfig(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, ExitCode> {
    ScenarioConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(match e {
            Error::Io(_) => EXIT_CONFIG,
            other => exit_code(&other),
        })
    })
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn run_simulate(config: PathBuf, out: Option<PathBuf>) -> ExitCode {
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let dir = out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let sim = match pipeline::simulate(&cfg) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Err(e) = pipeline::write_simulation(&dir, &sim) {
        return fail(e);
    }
    let r = &sim.report;
    println!("seed {} duration {} s -> {}", r.seed, r.duration, dir.display());
    println!(
        "lidar points {}  gyro samples {}  accel samples {}",
        r.lidar_points, r.gyro_samples, r.accel_samples
    );
    if r.faults_applied > 0 {
        let f = &r.faults;
        println!(
            "faults {}: dropped lidar {} gyro {} accel {}; saturated gyro {} accel {}",
            r.faults_applied,
            f.lidar_dropped,
            f.gyro_dropped,
            f.accel_dropped,
            f.gyro_saturated,
            f.accel_saturated
        );
    }
    ExitCode::SUCCESS
}

fn run_estimate(config: PathBuf, streams: PathBuf, out: PathBuf) -> ExitCode {
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let data = match io::load_streams(&streams) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let truth_path = streams.join(io::TRUTH_FILE);
    let truth = if truth_path.is_file() {
        match io::read_tum(&truth_path) {
            Ok(t) => Some(t),
            Err(e) => return fail(e),
        }
    } else {
        None
    };
    let rates_path = streams.join(TRUTH_RATES_FILE);
    let rates = if rates_path.is_file() {
        match io::read_rates(&rates_path) {
            Ok(r) => Some(r),
            Err(e) => return fail(e),
        }
    } else {
        None
    };
    let est = match pipeline::estimate(&cfg, &data, truth.as_deref(), rates.as_deref()) {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    if let Err(e) = est.write(&out) {
        return fail(e);
    }
    let r = &est.report;
    println!(
        "{} windows, {} iterations, {:.2} s wall time for {:.2} s of data ({} threads)",
        r.windows, r.total_iterations, r.wall_time, r.duration, r.threads
    );
    if let Some(a) = &r.ate {
        println!(
            "ATE rmse {:.4} m  mean {:.4} m  max {:.4} m  rotation {:.3} deg",
            a.rmse, a.mean, a.max, a.rotation_rmse_deg
        );
    }
    for g in &r.gaps {
        println!(
            "gap: {} {} from {:.3} s to {:.3} s",
            g.sensor, g.index, g.start, g.end
        );
    }
    if r.diverged_windows > 0 {
        eprintln!(
            "error: {} windows diverged; prediction used instead",
            r.diverged_windows
        );
        return ExitCode::from(EXIT_DIVERGED);
    }
    ExitCode::SUCCESS
}

fn run_evaluate(est: PathBuf, truth: PathBuf, json: bool) -> ExitCode {
    let report = match pipeline::evaluate(&est, &truth) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("serializable report")
        );
    } else {
        println!("pairs {}", report.pairs);
        println!("rmse {:.6} m", report.rmse);
        println!("mean {:.6} m", report.mean);
        println!("max {:.6} m", report.max);
        println!(
            "rmse xyz {:.6} {:.6} {:.6} m",
            report.rmse_xyz[0], report.rmse_xyz[1], report.rmse_xyz[2]
        );
        println!("rotation rmse {:.6} deg", report.rotation_rmse_deg);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads_from_env();
    match cli.command {
        Command::Simulate { config, out } => run_simulate(config, out),
        Command::Estimate { config, streams, out } => run_estimate(config, streams, out),
        Command::Evaluate { est, truth, json } => run_evaluate(est, truth, json),
    }
}
