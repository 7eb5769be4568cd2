//! Rotation-group primitives on SO(3).
//!
//! Rotations are `nalgebra::Rotation3<f64>` (world-from-body when used as a
//! trajectory pose). Tangent vectors are axis-angle 3-vectors in radians.
//! Perturbations are always applied on the right: `R ⊕ δ = R · Exp(δ)`.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Below this angle the closed forms switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance used when validating that a raw matrix is a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

// The derivative of J_r(θ)·u has coefficients with much worse cancellation
// than J_r itself, so its series branch is used over a wider range.
const DERIVATIVE_SERIES_ANGLE: f64 = 0.05;

pub type Rotation = Rotation3<f64>;
pub type AxisAngle = Vector3<f64>;

/// Cross-product matrix: `hat(v) * w == v.cross(&w)`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; reads the skew part of `m`.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map ℝ³ → SO(3) (Rodrigues).
pub fn exp(theta: &AxisAngle) -> Rotation {
    let t2 = theta.norm_squared();
    let t = t2.sqrt();
    let k = hat(theta);
    let m = if t < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        let half = 0.5 * t;
        let s = half.sin();
        // 1 - cos t written as 2 sin²(t/2) to avoid cancellation.
        Matrix3::identity() + (t.sin() / t) * k + (2.0 * s * s / t2) * k * k
    };
    Rotation::from_matrix_unchecked(m)
}

/// Logarithm map SO(3) → ℝ³ with ‖θ‖ ∈ [0, π].
///
/// Near π the axis is recovered from the symmetric part of `R` (the
/// eigenvector of `R + Rᵀ` for eigenvalue `2`). At exactly π the axis sign is
/// ambiguous; it is chosen so that the first non-zero component is positive.
pub fn log(r: &Rotation) -> AxisAngle {
    let m = r.matrix();
    let cos_t = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // v = sin(t) * axis
    let v = 0.5 * vee(&(m - m.transpose()));
    let sin_t = v.norm();
    let t = sin_t.atan2(cos_t);
    if t < SMALL_ANGLE {
        // sin t / t ≈ 1 - t²/6
        return v * (1.0 + t * t / 6.0);
    }
    if std::f64::consts::PI - t > 1e-4 {
        return v * (t / sin_t);
    }
    // (R + Rᵀ)/2 - cos(t) I = (1 - cos t) a aᵀ
    let b = 0.5 * (m + m.transpose()) - Matrix3::identity() * cos_t;
    let (mut col, mut best) = (0, b[(0, 0)]);
    for i in 1..3 {
        if b[(i, i)] > best {
            best = b[(i, i)];
            col = i;
        }
    }
    let mut axis: Vector3<f64> = b.column(col).into_owned();
    axis /= axis.norm();
    if sin_t > 1e-12 {
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * t
}

/// Logarithm of a raw 3×3 matrix, rejecting anything that is not a proper
/// rotation within [`ORTHONORMAL_TOL`].
pub fn log_matrix(m: &Matrix3<f64>) -> Result<AxisAngle> {
    let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if residual > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::NotARotation { residual, det });
    }
    Ok(log(&Rotation::from_matrix_unchecked(*m)))
}

fn jacobian_coeffs(t: f64) -> (f64, f64) {
    if t < SMALL_ANGLE {
        (0.5 - t * t / 24.0, 1.0 / 6.0 - t * t / 120.0)
    } else {
        let s = (0.5 * t).sin();
        let t2 = t * t;
        (2.0 * s * s / t2, (t - t.sin()) / (t2 * t))
    }
}

/// Right Jacobian `J_r(θ)`: `Exp(θ + δ) ≈ Exp(θ) · Exp(J_r(θ) δ)`.
pub fn right_jacobian(theta: &AxisAngle) -> Matrix3<f64> {
    let (a, b) = jacobian_coeffs(theta.norm());
    let k = hat(theta);
    Matrix3::identity() - a * k + b * k * k
}

/// Inverse right Jacobian. Only defined inside the injectivity radius.
pub fn right_jacobian_inv(theta: &AxisAngle) -> Result<Matrix3<f64>> {
    let t = theta.norm();
    if t >= std::f64::consts::PI {
        return Err(Error::AngleOutOfRange { angle: t });
    }
    Ok(right_jacobian_inv_unchecked(theta))
}

/// [`right_jacobian_inv`] without the range check, for hot paths where the
/// caller already guarantees ‖θ‖ < π.
pub(crate) fn right_jacobian_inv_unchecked(theta: &AxisAngle) -> Matrix3<f64> {
    let t = theta.norm();
    let c = if t < SMALL_ANGLE {
        1.0 / 12.0 + t * t / 720.0
    } else {
        1.0 / (t * t) - (1.0 + t.cos()) / (2.0 * t * t.sin())
    };
    let k = hat(theta);
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// `∂(J_r(θ)·u)/∂θ`, the sensitivity of the right-Jacobian action to the
/// angle itself. Needed by the chain rule of the local-state remap.
pub fn right_jacobian_apply_derivative(theta: &AxisAngle, u: &Vector3<f64>) -> Matrix3<f64> {
    let t = theta.norm();
    let t2 = t * t;
    // a(t) = (1 - cos t)/t², b(t) = (t - sin t)/t³ and their derivatives over t.
    let (a, b, da_t, db_t) = if t < DERIVATIVE_SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
            -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0,
        )
    } else {
        let s = (0.5 * t).sin();
        let one_minus_cos = 2.0 * s * s;
        let t3 = t2 * t;
        let t4 = t2 * t2;
        let a = one_minus_cos / t2;
        let b = (t - t.sin()) / t3;
        (
            a,
            b,
            t.sin() / t3 - 2.0 * one_minus_cos / t4,
            one_minus_cos / t4 - 3.0 * (t - t.sin()) / (t4 * t),
        )
    };
    let txu = theta.cross(u);
    let txtxu = theta.cross(&txu);
    let tu = theta.dot(u);
    a * hat(u) - txu * (da_t * theta.transpose())
        + b * (Matrix3::identity() * tu + theta * u.transpose() - 2.0 * u * theta.transpose())
        + txtxu * (db_t * theta.transpose())
}

/// `∂(J_r(θ)⁻¹·w)/∂θ`, obtained from [`right_jacobian_apply_derivative`]
/// through `d(J⁻¹) = -J⁻¹ dJ J⁻¹`.
pub fn right_jacobian_inv_apply_derivative(theta: &AxisAngle, w: &Vector3<f64>) -> Matrix3<f64> {
    let jinv = right_jacobian_inv_unchecked(theta);
    let u = jinv * w;
    -jinv * right_jacobian_apply_derivative(theta, &u)
}

/// Tangent-space difference `Log(a⁻¹ b)`.
#[inline]
pub fn minus(a: &Rotation, b: &Rotation) -> AxisAngle {
    log(&(a.inverse() * b))
}
