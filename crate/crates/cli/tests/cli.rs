use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ctgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctgp"))
        .args(args)
        .env("CTGP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
        .display()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, body).unwrap();
    p
}

fn short_stationary(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "seed = 3\nduration = 5.0\n[trajectory]\nkind = \"stationary\"\n\n\
         [[faults.faults]]\nsensor = \"gyro\"\nstart = 1.0\nend = 2.0\nmode = \"dropout\"\n",
    )
}

#[test]
fn simulate_writes_expected_sample_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = ctgp(&["simulate", &scenario("stationary"), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gyro = fs::read_to_string(out.join("gyro.txt")).unwrap();
    let rows = gyro
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count();
    assert_eq!(rows, 1000);
    assert!(out.join("lidar.txt").is_file());
    assert!(out.join("truth.tum").is_file());
}

#[test]
fn simulation_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_stationary(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert!(ctgp(&["simulate", s(&cfg), "--out", s(d)]).status.success());
    }
    for f in ["lidar.txt", "gyro.txt", "accel.txt", "truth.tum"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_reports_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_stationary(tmp.path());
    let o = ctgp(&["simulate", s(&cfg), "--out", s(&tmp.path().join("sim"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.contains("faults 1: dropped lidar 0 gyro 200 accel 0"),
        "{text}"
    );
}

#[test]
fn estimate_round_trip_and_missing_lidar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_stationary(tmp.path());
    let sim = tmp.path().join("sim");
    assert!(ctgp(&["simulate", s(&cfg), "--out", s(&sim)]).status.success());
    let out = tmp.path().join("est");
    let o = ctgp(&["estimate", s(&cfg), "--streams", s(&sim), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("ATE rmse"), "{text}");
    assert!(text.contains("gap: gyro 0"), "{text}");
    for f in ["trajectory.tum", "rates.txt", "report.json", "diagnostics.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["diverged_windows"], 0);

    fs::remove_file(sim.join("lidar.txt")).unwrap();
    let o = ctgp(&["estimate", s(&cfg), "--streams", s(&sim), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "duration = -1.0\n");
    let o = ctgp(&["simulate", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "no_such_key = 1\n");
    assert_eq!(ctgp(&["simulate", s(&cfg)]).status.code(), Some(2));
    let missing = tmp.path().join("absent.toml");
    assert_eq!(ctgp(&["simulate", s(&missing)]).status.code(), Some(2));
}

fn write_tum(path: &Path, points: &[[f64; 3]]) {
    let mut text = String::new();
    for (i, p) in points.iter().enumerate() {
        text.push_str(&format!(
            "{} {} {} {} 0 0 0 1\n",
            0.01 * i as f64,
            p[0],
            p[1],
            p[2]
        ));
    }
    fs::write(path, text).unwrap();
}

const OCTAHEDRON: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

#[test]
fn evaluate_identical_files_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("a.tum");
    write_tum(&p, &OCTAHEDRON);
    let o = ctgp(&["evaluate", "--est", s(&p), "--truth", s(&p)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.contains("pairs 6") && text.contains("rmse 0.000000 m"),
        "{text}"
    );
}

#[test]
fn evaluate_scaled_octahedron() {
    // Symmetry pins the alignment to the identity, so every point is off by 0.1.
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("truth.tum");
    let est = tmp.path().join("est.tum");
    write_tum(&truth, &OCTAHEDRON);
    write_tum(&est, &OCTAHEDRON.map(|p| p.map(|c| 1.1 * c)));
    let o = ctgp(&["evaluate", "--est", s(&est), "--truth", s(&truth), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pairs"], 6);
    assert!((v["rmse"].as_f64().unwrap() - 0.1).abs() < 1e-9, "{v}");
    assert!((v["max"].as_f64().unwrap() - 0.1).abs() < 1e-9);
    assert!(v["rotation_rmse_deg"].as_f64().unwrap() < 1e-6);
}

#[test]
fn evaluate_disjoint_ranges_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.tum");
    let b = tmp.path().join("b.tum");
    write_tum(&a, &OCTAHEDRON);
    fs::write(&b, "100 0 0 0 0 0 0 1\n100.01 1 0 0 0 0 0 1\n").unwrap();
    let o = ctgp(&["evaluate", "--est", s(&a), "--truth", s(&b)]);
    assert_eq!(o.status.code(), Some(3));
}
