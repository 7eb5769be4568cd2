//! Absolute trajectory error after a single rigid alignment.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::StampedPose;
use crate::so3::{self, Rotation};

/// Maximum timestamp gap for associating an estimate with a reference pose.
pub const DEFAULT_MAX_GAP: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteReport {
    pub pairs: usize,
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub rmse_xyz: [f64; 3],
    /// RMS of the residual attitude angle after alignment, degrees.
    pub rotation_rmse_deg: f64,
}

/// Nearest-timestamp association within `max_gap` seconds. Returns index
/// pairs `(estimate, reference)`.
pub fn associate(est: &[StampedPose], reference: &[StampedPose], max_gap: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let j = reference.partition_point(|r| r.t < e.t);
        let best = [j.checked_sub(1), (j < reference.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (reference[a].t - e.t)
                    .abs()
                    .total_cmp(&(reference[b].t - e.t).abs())
            });
        if let Some(j) = best {
            if (reference[j].t - e.t).abs() <= max_gap {
                out.push((i, j));
            }
        }
    }
    out
}

/// Position spread (second singular value of the cross-covariance, m²)
/// below which the alignment rotation is taken from the attitudes instead.
pub const MIN_ALIGNMENT_SPREAD: f64 = 1e-4;

fn project_to_rotation(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    Rotation::from_matrix_unchecked(u * s * vt)
}

fn cross_covariance(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
    }
    (cov / n, mx, my)
}

/// Least-squares rigid transform `(R, t)` with `y ≈ R x + t`.
pub fn align_rigid(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (Rotation, Vector3<f64>) {
    let (cov, mx, my) = cross_covariance(x, y);
    let r = project_to_rotation(&cov);
    (r, my - r * mx)
}

/// Like [`align_rigid`], but when the positions are too clustered to fix a
/// rotation the rotation is the chordal mean of `R_ref · R_estᵀ`.
fn align_poses(est: &[&StampedPose], reference: &[&StampedPose]) -> (Rotation, Vector3<f64>) {
    let x: Vec<Vector3<f64>> = est.iter().map(|p| p.position).collect();
    let y: Vec<Vector3<f64>> = reference.iter().map(|p| p.position).collect();
    let (cov, mx, my) = cross_covariance(&x, &y);
    let sv = cov.singular_values();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let r = if sorted[1] >= MIN_ALIGNMENT_SPREAD {
        project_to_rotation(&cov)
    } else {
        let sum: Matrix3<f64> = est
            .iter()
            .zip(reference)
            .map(|(e, r)| r.rotation.matrix() * e.rotation.matrix().transpose())
            .sum();
        project_to_rotation(&sum)
    };
    (r, my - r * mx)
}

pub fn ate(est: &[StampedPose], reference: &[StampedPose], max_gap: f64) -> Result<AteReport> {
    let pairs = associate(est, reference, max_gap);
    if pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let e: Vec<&StampedPose> = pairs.iter().map(|&(i, _)| &est[i]).collect();
    let f: Vec<&StampedPose> = pairs.iter().map(|&(_, j)| &reference[j]).collect();
    let (r, t) = align_poses(&e, &f);
    let x: Vec<Vector3<f64>> = e.iter().map(|p| p.position).collect();
    let y: Vec<Vector3<f64>> = f.iter().map(|p| p.position).collect();
    let mut sq = 0.0;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut axis = Vector3::zeros();
    let mut rot_sq = 0.0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let d = y[k] - (r * x[k] + t);
        let e = d.norm();
        sq += e * e;
        sum += e;
        max = max.max(e);
        axis += d.component_mul(&d);
        let dr = so3::log(&(reference[j].rotation.inverse() * r * est[i].rotation));
        rot_sq += dr.norm_squared();
    }
    let n = pairs.len() as f64;
    Ok(AteReport {
        pairs: pairs.len(),
        rmse: (sq / n).sqrt(),
        mean: sum / n,
        max,
        rmse_xyz: [(axis.x / n).sqrt(), (axis.y / n).sqrt(), (axis.z / n).sqrt()],
        rotation_rmse_deg: (rot_sq / n).sqrt().to_degrees(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn path(n: usize) -> Vec<StampedPose> {
        (0..n)
            .map(|i| {
                let t = 0.01 * i as f64;
                StampedPose {
                    t,
                    rotation: so3::exp(&Vector3::new(0.1 * t, 0.3 * t.sin(), t)),
                    position: Vector3::new(3.0 * t.sin(), (2.0 * t).cos(), 0.2 * t),
                }
            })
            .collect()
    }

    #[test]
    fn identical_is_zero() {
        let p = path(200);
        let r = ate(&p, &p, DEFAULT_MAX_GAP).unwrap();
        assert!(r.rmse < 1e-12 && r.max < 1e-12 && r.rotation_rmse_deg < 1e-6);
        assert_eq!(r.pairs, 200);
    }

    #[test]
    fn rigid_offset_is_removed() {
        let p = path(300);
        let g = so3::exp(&Vector3::new(0.3, -0.5, 2.0));
        let off = Vector3::new(5.0, -2.0, 1.0);
        let moved: Vec<StampedPose> = p
            .iter()
            .map(|s| StampedPose {
                t: s.t,
                rotation: g * s.rotation,
                position: g * s.position + off,
            })
            .collect();
        let r = ate(&moved, &p, DEFAULT_MAX_GAP).unwrap();
        assert!(r.rmse < 1e-9, "{}", r.rmse);
        assert!(r.rotation_rmse_deg < 1e-6);
    }

    #[test]
    fn clustered_positions_use_attitudes() {
        let g = so3::exp(&Vector3::new(0.0, 0.0, 1.0));
        let reference: Vec<StampedPose> = (0..100)
            .map(|i| StampedPose {
                t: 0.01 * i as f64,
                rotation: so3::exp(&Vector3::new(0.0, 0.0, 0.01 * i as f64)),
                position: Vector3::new(1e-4 * (i % 3) as f64, 0.0, 0.0),
            })
            .collect();
        let est: Vec<StampedPose> = reference
            .iter()
            .map(|s| StampedPose {
                rotation: g * s.rotation,
                position: g * s.position,
                ..*s
            })
            .collect();
        let r = ate(&est, &reference, DEFAULT_MAX_GAP).unwrap();
        assert!(r.rotation_rmse_deg < 1e-6, "{}", r.rotation_rmse_deg);
        assert!(r.rmse < 1e-9);
    }

    #[test]
    fn disjoint_ranges_fail() {
        let p = path(10);
        let later: Vec<StampedPose> = p.iter().map(|s| StampedPose { t: s.t + 100.0, ..*s }).collect();
        assert!(matches!(
            ate(&p, &later, DEFAULT_MAX_GAP),
            Err(Error::EmptyOverlap)
        ));
    }

    #[test]
    fn gaussian_noise_rmse() {
        let p = path(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 0.05;
        let n = Normal::new(0.0, sigma).unwrap();
        let noisy: Vec<StampedPose> = p
            .iter()
            .map(|s| StampedPose {
                position: s.position + Vector3::from_fn(|_, _| n.sample(&mut rng)),
                ..*s
            })
            .collect();
        let r = ate(&noisy, &p, DEFAULT_MAX_GAP).unwrap();
        let expect = sigma * 3f64.sqrt();
        assert!((r.rmse - expect).abs() < 0.1 * expect, "{} vs {}", r.rmse, expect);
    }

    #[test]
    fn association_respects_gap() {
        let p = path(10);
        let shifted: Vec<StampedPose> = p.iter().map(|s| StampedPose { t: s.t + 0.004, ..*s }).collect();
        assert_eq!(associate(&shifted, &p, 0.005).len(), 10);
        let far: Vec<StampedPose> = p
            .iter()
            .map(|s| StampedPose {
                t: s.t + 0.0051,
                ..*s
            })
            .collect();
        // spacing 0.01: 0.0051 past one sample is 0.0049 before the next
        assert_eq!(associate(&far, &p, 0.005).len(), 9);
        let none: Vec<StampedPose> = p.iter().map(|s| StampedPose { t: s.t + 0.2, ..*s }).collect();
        assert!(associate(&none, &p, 0.005).is_empty());
    }
}
