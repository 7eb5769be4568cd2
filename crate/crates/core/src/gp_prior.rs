//! Linear time-invariant motion priors.
//!
//! Each prior is the white-noise-driven chain `d^m p / dt^m = w(t)` for an
//! `N`-dimensional quantity `p`, with Markov state `[p, ṗ, …]` of size `m·N`.
//! Every block matrix is a small scalar coefficient matrix Kronecker-multiplied
//! with either `I_N` (transition) or `Q_c` (process noise).

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `ṗ = w`
    RandomWalk,
    /// `p̈ = w`
    ConstantVelocity,
    /// `p⃛ = w`
    ConstantAcceleration,
}

impl PriorKind {
    /// Number of stacked derivatives in the Markov state.
    pub fn order(self) -> usize {
        match self {
            PriorKind::RandomWalk => 1,
            PriorKind::ConstantVelocity => 2,
            PriorKind::ConstantAcceleration => 3,
        }
    }
}

/// Power-spectral density `Q_c` of the driving white noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDensity(DMatrix<f64>);

impl NoiseDensity {
    pub fn new(qc: DMatrix<f64>) -> Result<Self> {
        if !qc.is_square() {
            return Err(Error::NotPositiveDefinite("Q_c must be square"));
        }
        if (&qc - qc.transpose()).abs().max() > 1e-12 {
            return Err(Error::NotPositiveDefinite("Q_c is not symmetric"));
        }
        if Cholesky::new(qc.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("Q_c has a non-positive eigenvalue"));
        }
        Ok(Self(qc))
    }

    pub fn isotropic(dim: usize, density: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * density)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        Cholesky::new(self.0.clone())
            .expect("validated at construction")
            .inverse()
    }
}

/// Scalar transition coefficients, valid for any sign of `dt`.
pub fn transition_coeffs(kind: PriorKind, dt: f64) -> DMatrix<f64> {
    match kind {
        PriorKind::RandomWalk => DMatrix::from_element(1, 1, 1.0),
        PriorKind::ConstantVelocity => DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        PriorKind::ConstantAcceleration => {
            DMatrix::from_row_slice(3, 3, &[1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0])
        }
    }
}

/// Scalar process-noise coefficients; `Q(dt) = coeffs ⊗ Q_c`.
///
/// The constant-velocity off-diagonal entries are `dt²/2`, the value the
/// covariance integral produces (the matrix must be symmetric).
pub fn process_noise_coeffs(kind: PriorKind, dt: f64) -> DMatrix<f64> {
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    match kind {
        PriorKind::RandomWalk => DMatrix::from_element(1, 1, dt),
        PriorKind::ConstantVelocity => DMatrix::from_row_slice(2, 2, &[dt3 / 3.0, dt2 / 2.0, dt2 / 2.0, dt]),
        PriorKind::ConstantAcceleration => {
            let dt4 = dt3 * dt;
            let dt5 = dt4 * dt;
            DMatrix::from_row_slice(
                3,
                3,
                &[
                    dt5 / 20.0,
                    dt4 / 8.0,
                    dt3 / 6.0,
                    dt4 / 8.0,
                    dt3 / 3.0,
                    dt2 / 2.0,
                    dt3 / 6.0,
                    dt2 / 2.0,
                    dt,
                ],
            )
        }
    }
}

/// Inverse of [`process_noise_coeffs`] in closed form.
pub fn process_noise_inv_coeffs(kind: PriorKind, dt: f64) -> DMatrix<f64> {
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    match kind {
        PriorKind::RandomWalk => DMatrix::from_element(1, 1, 1.0 / dt),
        PriorKind::ConstantVelocity => {
            DMatrix::from_row_slice(2, 2, &[12.0 / dt3, -6.0 / dt2, -6.0 / dt2, 4.0 / dt])
        }
        PriorKind::ConstantAcceleration => {
            let dt4 = dt3 * dt;
            let dt5 = dt4 * dt;
            DMatrix::from_row_slice(
                3,
                3,
                &[
                    720.0 / dt5,
                    -360.0 / dt4,
                    60.0 / dt3,
                    -360.0 / dt4,
                    192.0 / dt3,
                    -36.0 / dt2,
                    60.0 / dt3,
                    -36.0 / dt2,
                    9.0 / dt,
                ],
            )
        }
    }
}

/// `Φ(Δt)` for an `n`-dimensional quantity.
pub fn transition(kind: PriorKind, n: usize, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidInterval {
            dt,
            expected: "non-negative",
        });
    }
    Ok(transition_coeffs(kind, dt).kronecker(&DMatrix::identity(n, n)))
}

/// `Q(Δt)` for noise density `qc`.
pub fn process_noise(kind: PriorKind, dt: f64, qc: &NoiseDensity) -> Result<DMatrix<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval {
            dt,
            expected: "positive",
        });
    }
    Ok(process_noise_coeffs(kind, dt).kronecker(qc.matrix()))
}

/// One LTI prior acting on one group of state components.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBlock {
    pub kind: PriorKind,
    pub qc: NoiseDensity,
}

impl PriorBlock {
    pub fn new(kind: PriorKind, qc: NoiseDensity) -> Self {
        Self { kind, qc }
    }

    /// Base dimension `N` of the driven quantity.
    pub fn base_dim(&self) -> usize {
        self.qc.dim()
    }

    /// Markov state dimension `order · N`.
    pub fn dim(&self) -> usize {
        self.kind.order() * self.base_dim()
    }

    pub fn transition(&self, dt: f64) -> Result<DMatrix<f64>> {
        transition(self.kind, self.base_dim(), dt)
    }

    pub fn process_noise(&self, dt: f64) -> Result<DMatrix<f64>> {
        process_noise(self.kind, dt, &self.qc)
    }

    pub fn process_noise_inv(&self, dt: f64) -> Result<DMatrix<f64>> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInterval {
                dt,
                expected: "positive",
            });
        }
        Ok(process_noise_inv_coeffs(self.kind, dt).kronecker(&self.qc.inverse()))
    }
}

/// Block-diagonal composition of priors. Block order is the state layout:
/// rotation, translation, gyroscope biases, accelerometer biases. Blocks
/// with zero dimension (no biases) are simply absent.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPrior {
    blocks: Vec<PriorBlock>,
}

impl HybridPrior {
    pub fn new(blocks: Vec<PriorBlock>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[PriorBlock] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(PriorBlock::dim).sum()
    }

    /// Start offset of each block in the stacked state.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = acc;
                acc += b.dim();
                o
            })
            .collect()
    }

    fn assemble(&self, mut f: impl FnMut(&PriorBlock) -> Result<DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (block, off) in self.blocks.iter().zip(self.offsets()) {
            let m = f(block)?;
            out.view_mut((off, off), (block.dim(), block.dim())).copy_from(&m);
        }
        Ok(out)
    }

    pub fn transition(&self, dt: f64) -> Result<DMatrix<f64>> {
        self.assemble(|b| b.transition(dt))
    }

    pub fn process_noise(&self, dt: f64) -> Result<DMatrix<f64>> {
        self.assemble(|b| b.process_noise(dt))
    }

    pub fn process_noise_inv(&self, dt: f64) -> Result<DMatrix<f64>> {
        self.assemble(|b| b.process_noise_inv(dt))
    }

    /// Dense prior covariance over a set of knot times, starting from `k0`
    /// at the first knot. Diagnostic only: the estimator never forms it.
    pub fn kernel_matrix(&self, knot_times: &[f64], k0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if k0.nrows() != d || k0.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: k0.nrows(),
            });
        }
        if Cholesky::new(k0.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("K₀"));
        }
        if knot_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotoneTimes);
        }
        let n = knot_times.len();
        let mut diag = Vec::with_capacity(n);
        diag.push(k0.clone());
        for i in 1..n {
            let dt = knot_times[i] - knot_times[i - 1];
            let phi = self.transition(dt)?;
            let prev = &diag[i - 1];
            diag.push(&phi * prev * phi.transpose() + self.process_noise(dt)?);
        }
        let mut out = DMatrix::zeros(n * d, n * d);
        for j in 0..n {
            for i in j..n {
                // K(t_i, t_j) = Φ(t_i, t_j) K(t_j, t_j) for i ≥ j
                let phi = self.transition(knot_times[i] - knot_times[j])?;
                let block = phi * &diag[j];
                out.view_mut((i * d, j * d), (d, d)).copy_from(&block);
                out.view_mut((j * d, i * d), (d, d)).copy_from(&block.transpose());
            }
        }
        Ok(out)
    }
}
