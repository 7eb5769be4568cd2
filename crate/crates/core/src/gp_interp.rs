//! Constant-time Gaussian-process interpolation inside one segment.
//!
//! For a query `τ ∈ [t_{k-1}, t_k]` with `α = (τ − t_{k-1}) / Δt`, the
//! posterior mean of the Markov state is `Λ(α)·x(t_{k-1}) + Ψ(α)·x(t_k)`.
//! The coefficient matrices do not depend on `Q_c`, so they are stored as
//! small scalar matrices (`order × order`) to be Kronecker-expanded with
//! `I_N` when needed.
//!
//! Rotations are interpolated through a local state anchored at the left
//! knot: `θ(t) = Log(R_{k-1}⁻¹ R(t))`, `θ̇(t) = J_r(θ)⁻¹ ω(t)`.

use nalgebra::{DMatrix, DVector, DVectorView, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::gp_prior::PriorKind;
use crate::so3::{self, Rotation};

/// Interpolation coefficients for one prior kind, segment length and query.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpCoeffs {
    pub kind: PriorKind,
    pub dt: f64,
    pub alpha: f64,
    /// Scalar `Λ`, `order × order`.
    pub lambda: DMatrix<f64>,
    /// Scalar `Ψ`, `order × order`.
    pub psi: DMatrix<f64>,
}

impl InterpCoeffs {
    pub fn order(&self) -> usize {
        self.kind.order()
    }

    /// `Λ ⊗ I_n`
    pub fn lambda_full(&self, n: usize) -> DMatrix<f64> {
        self.lambda.kronecker(&DMatrix::identity(n, n))
    }

    /// `Ψ ⊗ I_n`
    pub fn psi_full(&self, n: usize) -> DMatrix<f64> {
        self.psi.kronecker(&DMatrix::identity(n, n))
    }
}

/// Closed-form `Λ`/`Ψ` for a query `offset` seconds after the left knot.
///
/// `offset == dt` is accepted (it reproduces the right knot); production
/// queries stay in the half-open segment.
pub fn interp_coeffs(kind: PriorKind, dt: f64, offset: f64) -> Result<InterpCoeffs> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval {
            dt,
            expected: "positive",
        });
    }
    if !(0.0..=dt).contains(&offset) {
        return Err(Error::OffsetOutsideSegment { offset, dt });
    }
    Ok(coeffs_at_alpha(kind, dt, offset / dt))
}

pub(crate) fn coeffs_at_alpha(kind: PriorKind, dt: f64, a: f64) -> InterpCoeffs {
    let b = 1.0 - a;
    let (lambda, psi) = match kind {
        PriorKind::RandomWalk => (DMatrix::from_element(1, 1, b), DMatrix::from_element(1, 1, a)),
        PriorKind::ConstantVelocity => {
            let a2 = a * a;
            let a3 = a2 * a;
            (
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        (1.0 + 2.0 * a) * b * b,
                        a * b * b * dt,
                        -6.0 * a * b / dt,
                        (1.0 - 3.0 * a) * b,
                    ],
                ),
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        3.0 * a2 - 2.0 * a3,
                        (a3 - a2) * dt,
                        6.0 * a * b / dt,
                        3.0 * a2 - 2.0 * a,
                    ],
                ),
            )
        }
        PriorKind::ConstantAcceleration => {
            let a2 = a * a;
            let a3 = a2 * a;
            let b2 = b * b;
            let b3 = b2 * b;
            let dt2 = dt * dt;
            (
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        (1.0 + 3.0 * a + 6.0 * a2) * b3,
                        (a + 3.0 * a2) * b3 * dt,
                        0.5 * a2 * b3 * dt2,
                        -30.0 * a2 * b2 / dt,
                        (1.0 + 2.0 * a - 15.0 * a2) * b2,
                        0.5 * (2.0 * a - 5.0 * a2) * b2 * dt,
                        -60.0 * a * (1.0 - 2.0 * a) * b / dt2,
                        -12.0 * a * (3.0 - 5.0 * a) * b / dt,
                        (1.0 - 8.0 * a + 10.0 * a2) * b,
                    ],
                ),
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        (10.0 - 15.0 * a + 6.0 * a2) * a3,
                        (-4.0 + 7.0 * a - 3.0 * a2) * a3 * dt,
                        0.5 * b2 * a3 * dt2,
                        30.0 * b2 * a2 / dt,
                        (-12.0 + 28.0 * a - 15.0 * a2) * a2,
                        0.5 * (3.0 - 8.0 * a + 5.0 * a2) * a2 * dt,
                        60.0 * (a - 3.0 * a2 + 2.0 * a3) / dt2,
                        -12.0 * (2.0 * a - 7.0 * a2 + 5.0 * a3) / dt,
                        3.0 * a - 12.0 * a2 + 10.0 * a3,
                    ],
                ),
            )
        }
    };
    InterpCoeffs {
        kind,
        dt,
        alpha: a,
        lambda,
        psi,
    }
}

/// Affine interpolation of a vector-space Markov state of base dimension `n`.
pub fn interp_vector(
    left: DVectorView<'_, f64>,
    right: DVectorView<'_, f64>,
    c: &InterpCoeffs,
    n: usize,
) -> Result<DVector<f64>> {
    let dim = c.order() * n;
    for got in [left.len(), right.len()] {
        if got != dim {
            return Err(Error::DimensionMismatch { expected: dim, got });
        }
    }
    let mut out = DVector::zeros(dim);
    for i in 0..c.order() {
        for j in 0..c.order() {
            let (l, p) = (c.lambda[(i, j)], c.psi[(i, j)]);
            for d in 0..n {
                out[i * n + d] += l * left[j * n + d] + p * right[j * n + d];
            }
        }
    }
    Ok(out)
}

/// Quantities of one segment's rotational local state that do not depend on
/// the query time. Computing them once per segment keeps per-measurement
/// interpolation cheap.
#[derive(Debug, Clone)]
pub struct RotationSegment {
    pub kind: PriorKind,
    pub dt: f64,
    pub r_left: Rotation,
    pub omega_left: Vector3<f64>,
    /// `θ_k(t_k) = Log(R_{k-1}⁻¹ R_k)`
    pub theta_end: Vector3<f64>,
    /// `θ̇_k(t_k) = J_r(θ_k)⁻¹ ω_k` (for random-walk rotation `θ_k / Δt`)
    pub theta_dot_end: Vector3<f64>,
    // ∂θ_end/∂δR_left, ∂θ_end/∂δR_right
    pub(crate) d_theta_end: [Matrix3<f64>; 2],
    // ∂θ̇_end/∂δR_left, ∂θ̇_end/∂δR_right, ∂θ̇_end/∂δω_right
    pub(crate) d_theta_dot_end: [Matrix3<f64>; 3],
}

/// Interpolated rotation and body rate, with Jacobians w.r.t. the right-
/// perturbations of the bounding knots in the order
/// `[δR_left, δω_left, δR_right, δω_right]`. For a random-walk rotation
/// prior the `δω` entries are zero.
#[derive(Debug, Clone)]
pub struct RotationInterp {
    pub rotation: Rotation,
    pub omega: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub theta_dot: Vector3<f64>,
    pub d_rotation: [Matrix3<f64>; 4],
    pub d_omega: [Matrix3<f64>; 4],
}

impl RotationSegment {
    /// Builds the local-state endpoints of a segment. Fails when the relative
    /// rotation reaches π (segment too coarse for the local chart).
    pub fn new(
        kind: PriorKind,
        dt: f64,
        r_left: &Rotation,
        omega_left: &Vector3<f64>,
        r_right: &Rotation,
        omega_right: &Vector3<f64>,
    ) -> Result<Self> {
        if kind == PriorKind::ConstantAcceleration {
            return Err(Error::InvalidStateConfig(
                "rotation supports random-walk and constant-velocity priors only".into(),
            ));
        }
        let rel = r_left.inverse() * r_right;
        let theta_end = so3::log(&rel);
        let jinv = so3::right_jacobian_inv(&theta_end)?;
        let d_theta_left = -jinv * rel.matrix().transpose();
        let (theta_dot_end, d_theta_dot_end, omega_left) = match kind {
            PriorKind::ConstantVelocity => {
                let m = so3::right_jacobian_inv_apply_derivative(&theta_end, omega_right);
                (
                    jinv * omega_right,
                    [m * d_theta_left, m * jinv, jinv],
                    *omega_left,
                )
            }
            _ => (
                theta_end / dt,
                [d_theta_left / dt, jinv / dt, Matrix3::zeros()],
                Vector3::zeros(),
            ),
        };
        Ok(Self {
            kind,
            dt,
            r_left: *r_left,
            omega_left,
            theta_end,
            theta_dot_end,
            d_theta_end: [d_theta_left, jinv],
            d_theta_dot_end,
        })
    }

    // (λ01, λ11, ψ00, ψ01, ψ10, ψ11) for the local state [θ; θ̇]; the
    // left θ is identically zero so λ00 and λ10 never contribute.
    fn scalars(&self, alpha: f64) -> [f64; 6] {
        match self.kind {
            PriorKind::ConstantVelocity => {
                let c = coeffs_at_alpha(PriorKind::ConstantVelocity, self.dt, alpha);
                [
                    c.lambda[(0, 1)],
                    c.lambda[(1, 1)],
                    c.psi[(0, 0)],
                    c.psi[(0, 1)],
                    c.psi[(1, 0)],
                    c.psi[(1, 1)],
                ]
            }
            // θ(α) = α θ_end and its time derivative θ_end/Δt
            _ => [0.0, 0.0, alpha, 0.0, 0.0, 1.0],
        }
    }

    /// Local state `(θ, θ̇)` at normalized time `alpha`.
    pub fn local_state(&self, alpha: f64) -> (Vector3<f64>, Vector3<f64>) {
        let [l01, l11, p00, p01, p10, p11] = self.scalars(alpha);
        let theta = l01 * self.omega_left + p00 * self.theta_end + p01 * self.theta_dot_end;
        let theta_dot = l11 * self.omega_left + p10 * self.theta_end + p11 * self.theta_dot_end;
        (theta, theta_dot)
    }

    /// Rotation only, no Jacobians.
    pub fn rotation_at(&self, alpha: f64) -> Rotation {
        let (theta, _) = self.local_state(alpha);
        self.r_left * so3::exp(&theta)
    }

    pub fn evaluate(&self, alpha: f64, with_omega_jacobians: bool) -> RotationInterp {
        let [l01, l11, p00, p01, p10, p11] = self.scalars(alpha);
        let (theta, theta_dot) = self.local_state(alpha);
        let exp_theta = so3::exp(&theta);
        let jr = so3::right_jacobian(&theta);
        let omega = jr * theta_dot;

        let [dte_l, dte_r] = self.d_theta_end;
        let [dtde_l, dtde_r, dtde_w] = self.d_theta_dot_end;
        let eye = Matrix3::identity();
        let d_theta = [
            p00 * dte_l + p01 * dtde_l,
            l01 * eye,
            p00 * dte_r + p01 * dtde_r,
            p01 * dtde_w,
        ];
        let d_rotation = [
            exp_theta.matrix().transpose() + jr * d_theta[0],
            jr * d_theta[1],
            jr * d_theta[2],
            jr * d_theta[3],
        ];
        let d_omega = if with_omega_jacobians {
            let d_theta_dot = [
                p10 * dte_l + p11 * dtde_l,
                l11 * eye,
                p10 * dte_r + p11 * dtde_r,
                p11 * dtde_w,
            ];
            let djr = so3::right_jacobian_apply_derivative(&theta, &theta_dot);
            [
                djr * d_theta[0] + jr * d_theta_dot[0],
                djr * d_theta[1] + jr * d_theta_dot[1],
                djr * d_theta[2] + jr * d_theta_dot[2],
                djr * d_theta[3] + jr * d_theta_dot[3],
            ]
        } else {
            [Matrix3::zeros(); 4]
        };
        RotationInterp {
            rotation: self.r_left * exp_theta,
            omega,
            theta,
            theta_dot,
            d_rotation,
            d_omega,
        }
    }
}

/// Interpolates rotation and body angular velocity between two knots using
/// the constant-velocity prior on the local state.
pub fn interp_rotation(
    r_left: &Rotation,
    omega_left: &Vector3<f64>,
    r_right: &Rotation,
    omega_right: &Vector3<f64>,
    c: &InterpCoeffs,
) -> Result<(Rotation, Vector3<f64>)> {
    let seg = RotationSegment::new(c.kind, c.dt, r_left, omega_left, r_right, omega_right)?;
    let out = seg.evaluate(c.alpha, false);
    Ok((out.rotation, out.omega))
}
