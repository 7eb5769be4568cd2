//! Text formats: TUM trajectories and line-delimited sensor streams.
//!
//! Stream records are `lidar j t x y z`, `gyro j t wx wy wz sat` and
//! `accel j t ax ay az sat`, one per line, SI units, with `sat` 0 or 1.
//! Floats are written with the shortest representation that round-trips.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::factors::{ImuSample, LidarPoint};
use crate::sim::Streams;
use crate::so3::Rotation;

pub const LIDAR_FILE: &str = "lidar.txt";
pub const GYRO_FILE: &str = "gyro.txt";
pub const ACCEL_FILE: &str = "accel.txt";
pub const TRUTH_FILE: &str = "truth.tum";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

/// `%g`-style formatting with `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -5 || exp >= sig as i32 {
        let mant = trim_zeros(mant);
        return format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (sig as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_tum(w: &mut impl Write, poses: &[StampedPose]) -> std::io::Result<()> {
    for p in poses {
        let q = UnitQuaternion::from_rotation_matrix(&p.rotation);
        let q = q.quaternion();
        let f = |x: f64| format_sig(x, 9);
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            f(p.t),
            f(p.position.x),
            f(p.position.y),
            f(p.position.z),
            f(q.i),
            f(q.j),
            f(q.k),
            f(q.w)
        )?;
    }
    Ok(())
}

pub fn save_tum(path: &Path, poses: &[StampedPose]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tum(&mut w, poses)?;
    w.flush()?;
    Ok(())
}

fn parse_floats(path: &Path, line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line_no, format!("invalid number '{s}'")))
        })
        .collect()
}

/// Reads a TUM file; blank lines and `#` comments are skipped.
pub fn read_tum(path: &Path) -> Result<Vec<StampedPose>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let v = parse_floats(path, i + 1, &fields)?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(Error::parse(path, i + 1, "quaternion is not unit length"));
        }
        out.push(StampedPose {
            t: v[0],
            rotation: UnitQuaternion::from_quaternion(q).to_rotation_matrix(),
            position: Vector3::new(v[1], v[2], v[3]),
        });
    }
    Ok(out)
}

pub fn write_lidar(w: &mut impl Write, points: &[LidarPoint]) -> std::io::Result<()> {
    for p in points {
        writeln!(
            w,
            "lidar {} {} {} {} {}",
            p.sensor, p.t, p.point.x, p.point.y, p.point.z
        )?;
    }
    Ok(())
}

pub fn write_imu(w: &mut impl Write, tag: &str, samples: &[ImuSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(
            w,
            "{tag} {} {} {} {} {} {}",
            s.sensor,
            s.t,
            s.value.x,
            s.value.y,
            s.value.z,
            u8::from(s.saturated)
        )?;
    }
    Ok(())
}

/// Writes `lidar.txt`, `gyro.txt` and `accel.txt` into `dir`.
pub fn save_streams(dir: &Path, streams: &Streams) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(LIDAR_FILE))?);
    write_lidar(&mut w, &streams.lidar)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join(GYRO_FILE))?);
    write_imu(&mut w, "gyro", &streams.gyro)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join(ACCEL_FILE))?);
    write_imu(&mut w, "accel", &streams.accel)?;
    w.flush()?;
    Ok(())
}

enum Record {
    Lidar(LidarPoint),
    Gyro(ImuSample),
    Accel(ImuSample),
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<Record> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let tag = fields[0];
    let expected = match tag {
        "lidar" => 6,
        "gyro" | "accel" => 7,
        _ => {
            return Err(Error::parse(
                path,
                line_no,
                format!("unknown record type '{tag}'"),
            ))
        }
    };
    if fields.len() != expected {
        return Err(Error::parse(
            path,
            line_no,
            format!("'{tag}' record needs {expected} fields, found {}", fields.len()),
        ));
    }
    let sensor: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(path, line_no, format!("invalid sensor index '{}'", fields[1])))?;
    let v = parse_floats(path, line_no, &fields[2..6])?;
    let vec = Vector3::new(v[1], v[2], v[3]);
    if tag == "lidar" {
        return Ok(Record::Lidar(LidarPoint::new(v[0], sensor, vec)));
    }
    let saturated = match fields[6] {
        "0" => false,
        "1" => true,
        s => {
            return Err(Error::parse(
                path,
                line_no,
                format!("saturation flag must be 0 or 1, got '{s}'"),
            ))
        }
    };
    let s = ImuSample {
        t: v[0],
        sensor,
        value: vec,
        saturated,
    };
    Ok(if tag == "gyro" {
        Record::Gyro(s)
    } else {
        Record::Accel(s)
    })
}

fn read_records(path: &Path, streams: &mut Streams) -> Result<()> {
    let f = fs::File::open(path)?;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_record(path, i + 1, line)? {
            Record::Lidar(p) => streams.lidar.push(p),
            Record::Gyro(s) => streams.gyro.push(s),
            Record::Accel(s) => streams.accel.push(s),
        }
    }
    Ok(())
}

/// Reads every stream file present in `dir`. A missing or empty LiDAR
/// stream is an error; IMU files are optional.
pub fn load_streams(dir: &Path) -> Result<Streams> {
    let mut streams = Streams::default();
    let lidar: PathBuf = dir.join(LIDAR_FILE);
    if !lidar.is_file() {
        return Err(Error::MissingInput(format!(
            "LiDAR stream {} not found",
            lidar.display()
        )));
    }
    read_records(&lidar, &mut streams)?;
    for name in [GYRO_FILE, ACCEL_FILE] {
        let p = dir.join(name);
        if p.is_file() {
            read_records(&p, &mut streams)?;
        }
    }
    if streams.lidar.is_empty() {
        return Err(Error::MissingInput(format!(
            "LiDAR stream {} is empty",
            lidar.display()
        )));
    }
    streams.sort();
    Ok(streams)
}

/// `t wx wy wz` rows of estimated body rates.
pub fn save_rates(path: &Path, rates: &[(f64, Vector3<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (t, r) in rates {
        writeln!(w, "{} {} {} {}", format_sig(*t, 9), r.x, r.y, r.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`save_rates`].
pub fn read_rates(path: &Path) -> Result<Vec<(f64, Vector3<f64>)>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let v = parse_floats(path, i + 1, &fields)?;
        out.push((v[0], Vector3::new(v[1], v[2], v[3])));
    }
    Ok(out)
}
