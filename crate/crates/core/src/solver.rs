//! Sliding-window MAP estimation.
//!
//! The window holds `K + 1` knots. Its energy is the sum of the kinematic
//! prior between consecutive knots, LiDAR/gyro/accel observations inside
//! each segment, and a Gaussian marginal prior on the first knot. The normal
//! equations are block-tridiagonal in the knots and are solved by a block
//! Cholesky sweep.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    accel_residual, gp_prior_residual, gyro_residual, lidar_residual, MeasurementBatch, NoiseModel,
    PlaneCorrespondence,
};
use crate::gp_prior::HybridPrior;
use crate::so3;
use crate::trajectory::{Extrinsics, Gravity, KnotState, StateConfig, StateLayout, Trajectory};
use crate::voxel_map::VoxelMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Converged once `‖Δx‖∞` drops below this (m, rad, ...).
    pub tolerance: f64,
    /// Re-associate LiDAR correspondences every this many iterations.
    pub reassociate_every: usize,
    /// First Levenberg damping tried after an undamped step fails.
    pub initial_damping: f64,
    pub damping_factor: f64,
    pub max_damping: f64,
    /// Correspondences with a larger point-to-plane distance are ignored.
    pub max_point_to_plane: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 8,
            tolerance: 1e-4,
            reassociate_every: 1,
            initial_damping: 1e-4,
            damping_factor: 10.0,
            max_damping: 1e8,
            max_point_to_plane: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.reassociate_every == 0 {
            return Err(Error::Config(
                "solver.max_iterations and solver.reassociate_every must be positive".into(),
            ));
        }
        for (name, v) in [
            ("tolerance", self.tolerance),
            ("initial_damping", self.initial_damping),
            ("max_damping", self.max_damping),
            ("max_point_to_plane", self.max_point_to_plane),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if !(self.damping_factor > 1.0) {
            return Err(Error::Config("solver.damping_factor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Dense storage of block-structured normal equations `H Δx = −g`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    block_dim: usize,
    blocks: usize,
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl NormalEquations {
    pub fn new(blocks: usize, block_dim: usize) -> Self {
        let n = blocks * block_dim;
        Self {
            block_dim,
            blocks,
            h: DMatrix::zeros(n, n),
            g: DVector::zeros(n),
        }
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks * self.block_dim
    }

    /// Adds `Jᵀ W J` and `Jᵀ W e` for a factor whose Jacobian spans the
    /// consecutive blocks starting at `first`. `W = None` means the factor is
    /// already whitened.
    pub fn add_factor(
        &mut self,
        first: usize,
        jacobian: &DMatrix<f64>,
        information: Option<&DMatrix<f64>>,
        residual: &DVector<f64>,
    ) {
        let cols = jacobian.ncols();
        let o = first * self.block_dim;
        match information {
            Some(w) => {
                let wj = w * jacobian;
                let mut hv = self.h.view_mut((o, o), (cols, cols));
                hv.gemm_tr(1.0, jacobian, &wj, 1.0);
                let mut gv = self.g.rows_mut(o, cols);
                gv.gemv_tr(1.0, &wj, residual, 1.0);
            }
            None => {
                let mut hv = self.h.view_mut((o, o), (cols, cols));
                hv.gemm_tr(1.0, jacobian, jacobian, 1.0);
                let mut gv = self.g.rows_mut(o, cols);
                gv.gemv_tr(1.0, jacobian, residual, 1.0);
            }
        }
    }

    /// Adds a precomputed local system over consecutive blocks.
    pub fn add_local(&mut self, first: usize, h: &DMatrix<f64>, g: &DVector<f64>) {
        let o = first * self.block_dim;
        let mut hv = self.h.view_mut((o, o), h.shape());
        hv += h;
        let mut gv = self.g.rows_mut(o, g.len());
        gv += g;
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.block_dim;
        self.h.view((i * n, j * n), (n, n)).into_owned()
    }

    /// Largest entry outside the block tridiagonal band.
    pub fn off_band_max(&self) -> f64 {
        let n = self.block_dim;
        let mut m = 0.0f64;
        for i in 0..self.blocks {
            for j in 0..self.blocks {
                if i.abs_diff(j) > 1 {
                    m = m.max(self.h.view((i * n, j * n), (n, n)).abs().max());
                }
            }
        }
        m
    }

    fn damped_diagonal(&self, lambda: f64) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            let d = self.h[(i, i)];
            d + lambda * d.max(1e-9)
        })
    }

    /// Solves `(H + λ·diag(H)) Δx = −g` with a block Cholesky sweep.
    pub fn solve(&self, lambda: f64) -> Result<DVector<f64>> {
        let n = self.block_dim;
        let diag = self.damped_diagonal(lambda);
        let mut chols: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks);
        let mut subs: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks);
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(self.blocks);
        for i in 0..self.blocks {
            let mut d = self.block(i, i);
            for k in 0..n {
                d[(k, k)] = diag[i * n + k];
            }
            let mut r = -self.g.rows(i * n, n).into_owned();
            if i > 0 {
                // B_i = H_{i,i-1} L_{i-1}^{-T}
                let lp = &chols[i - 1];
                let hsub = self.block(i, i - 1);
                let bt = lp
                    .solve_lower_triangular(&hsub.transpose())
                    .ok_or(Error::Singular)?;
                let b = bt.transpose();
                d -= &b * &bt;
                r -= &b * &y[i - 1];
                subs.push(b);
            }
            let l = d.cholesky().ok_or(Error::Singular)?.l();
            let yi = l.solve_lower_triangular(&r).ok_or(Error::Singular)?;
            chols.push(l);
            y.push(yi);
        }
        let mut x = vec![DVector::zeros(n); self.blocks];
        for i in (0..self.blocks).rev() {
            let mut rhs = y[i].clone();
            if i + 1 < self.blocks {
                rhs -= subs[i].transpose() * &x[i + 1];
            }
            x[i] = chols[i].tr_solve_lower_triangular(&rhs).ok_or(Error::Singular)?;
        }
        let mut out = DVector::zeros(self.dim());
        for (i, xi) in x.iter().enumerate() {
            out.rows_mut(i * n, n).copy_from(xi);
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::Singular)
        }
    }

    /// Dense Cholesky reference solve of the same damped system.
    pub fn solve_dense(&self, lambda: f64) -> Result<DVector<f64>> {
        let mut h = self.h.clone();
        h.set_diagonal(&self.damped_diagonal(lambda));
        let c = h.cholesky().ok_or(Error::Singular)?;
        Ok(c.solve(&(-&self.g)))
    }
}

/// Result of eliminating the leading block of a joint system.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurResult {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Number of negative eigenvalues clamped to zero.
    pub clamped: usize,
}

/// Eliminates the first `drop` variables of `(h, g)`:
/// `H' = H₁₁ − H₁₀H₀₀⁻¹H₀₁`, `g' = g₁ − H₁₀H₀₀⁻¹g₀`.
/// Negative eigenvalues of `H'` are clamped to zero.
pub fn schur_complement(h: &DMatrix<f64>, g: &DVector<f64>, drop: usize) -> SchurResult {
    let n = h.nrows();
    let keep = n - drop;
    let h00 = h.view((0, 0), (drop, drop)).into_owned();
    let h10 = h.view((drop, 0), (keep, drop)).into_owned();
    let h11 = h.view((drop, drop), (keep, keep)).into_owned();
    let g0 = g.rows(0, drop).into_owned();
    let g1 = g.rows(drop, keep).into_owned();
    let h00_inv = pseudo_inverse_spd(&h00);
    let k = &h10 * &h00_inv;
    let hs = &h11 - &k * h10.transpose();
    let gs = g1 - &k * g0;
    let (hs, clamped) = clamp_psd(&hs);
    SchurResult {
        h: hs,
        g: gs,
        clamped,
    }
}

fn pseudo_inverse_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return c.inverse();
    }
    let eig = SymmetricEigen::new(sym);
    let tol = eig.eigenvalues.abs().max() * 1e-12;
    let inv = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Symmetrizes and clamps negative eigenvalues to zero.
pub fn clamp_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let scale = eig.eigenvalues.abs().max().max(1.0);
    let negative = eig.eigenvalues.iter().filter(|&&v| v < -1e-12 * scale).count();
    if negative == 0 {
        return (sym, 0);
    }
    crate::trajectory::log_warning(&format!(
        "marginal information had {negative} negative eigenvalue(s); clamped to zero"
    ));
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    (
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose(),
        negative,
    )
}

/// Gaussian prior on the first knot of the window in information form:
/// `E(x) = ½ δᵀ H δ + bᵀ δ` with `δ = x ⊟ x̄` and `x̄` held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    pub linearization: KnotState,
    pub information: DMatrix<f64>,
    pub vector: DVector<f64>,
}

impl MarginalPrior {
    /// `e₀ = x₀ ⊟ μ₀` weighted by `K₀⁻¹`.
    pub fn from_gaussian(mean: &KnotState, covariance: &DMatrix<f64>) -> Result<Self> {
        let c = covariance
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("initial covariance"))?;
        Ok(Self {
            linearization: mean.clone(),
            information: c.inverse(),
            vector: DVector::zeros(covariance.nrows()),
        })
    }

    fn delta_and_jacobian(&self, x: &KnotState, layout: &StateLayout) -> (DVector<f64>, DMatrix<f64>) {
        let d = x.local_difference(&self.linearization, layout);
        let mut j = DMatrix::identity(layout.dim, layout.dim);
        let dr = d.fixed_rows::<3>(layout.rotation).into_owned();
        j.fixed_view_mut::<3, 3>(layout.rotation, layout.rotation)
            .copy_from(&so3::right_jacobian_inv_unchecked(&dr));
        (d, j)
    }

    pub fn energy(&self, x: &KnotState, layout: &StateLayout) -> f64 {
        let d = x.local_difference(&self.linearization, layout);
        0.5 * d.dot(&(&self.information * &d)) + self.vector.dot(&d)
    }

    /// Local `(H, g)` in the tangent space of `x`.
    pub fn linearize(&self, x: &KnotState, layout: &StateLayout) -> (DMatrix<f64>, DVector<f64>) {
        let (d, j) = self.delta_and_jacobian(x, layout);
        let hj = &self.information * &j;
        let h = j.transpose() * &hj;
        let g = j.transpose() * (&self.information * &d + &self.vector);
        (h, g)
    }
}

/// A nonlinear least-squares problem over a manifold-valued state.
pub trait Problem {
    type State: Clone;

    /// Hook run before linearizing at iteration `iteration` (e.g. data
    /// association). Not called between the trial steps of one iteration.
    fn refresh(&mut self, _state: &Self::State, _iteration: usize) {}

    fn energy(&self, state: &Self::State) -> f64;

    fn linearize(&self, state: &Self::State) -> (NormalEquations, f64);

    fn retract(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy_before: f64,
    pub energy_after: f64,
    pub step_norm: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub records: Vec<IterationRecord>,
}

/// Gauss-Newton with a Levenberg fallback: each iteration first tries the
/// undamped step and only damps `diag(H)` if the energy would increase.
pub fn gauss_newton<P: Problem>(
    problem: &mut P,
    initial: P::State,
    config: &SolverConfig,
) -> (P::State, OptimizeReport) {
    let mut x = initial;
    let mut report = OptimizeReport::default();
    let mut first = true;
    let mut lambda_hint = 0.0;
    for it in 0..config.max_iterations {
        if it % config.reassociate_every == 0 {
            problem.refresh(&x, it);
        }
        let (ne, e0) = problem.linearize(&x);
        if first {
            report.initial_energy = e0;
            report.final_energy = e0;
            first = false;
        }
        report.iterations = it + 1;
        let mut lambda = lambda_hint;
        let mut accepted = None;
        loop {
            let step = ne.solve(lambda).or_else(|_| ne.solve_dense(lambda));
            if let Ok(dx) = step {
                let cand = problem.retract(&x, &dx);
                let e1 = problem.energy(&cand);
                if e1.is_finite() && e1 <= e0 {
                    accepted = Some((cand, dx, e1));
                    break;
                }
            }
            lambda = if lambda == 0.0 {
                config.initial_damping
            } else {
                lambda * config.damping_factor
            };
            if lambda > config.max_damping {
                break;
            }
        }
        match accepted {
            Some((cand, dx, e1)) => {
                let step_norm = dx.amax();
                report.records.push(IterationRecord {
                    iteration: it,
                    energy_before: e0,
                    energy_after: e1,
                    step_norm,
                    damping: lambda,
                    accepted: true,
                });
                x = cand;
                report.final_energy = e1;
                lambda_hint = if lambda > 0.0 {
                    (lambda / config.damping_factor).max(config.initial_damping)
                } else {
                    0.0
                };
                if step_norm < config.tolerance {
                    report.converged = true;
                    break;
                }
            }
            None => {
                report.records.push(IterationRecord {
                    iteration: it,
                    energy_before: e0,
                    energy_after: e0,
                    step_norm: 0.0,
                    damping: lambda,
                    accepted: false,
                });
                // No descent direction left at any damping: a local minimum
                // within numerical precision.
                report.converged = true;
                break;
            }
        }
    }
    let steps: Vec<f64> = report
        .records
        .iter()
        .filter(|r| r.accepted)
        .map(|r| r.step_norm)
        .collect();
    report.diverged = !report.final_energy.is_finite()
        || (!report.converged && steps.len() >= 2 && steps.windows(2).all(|w| w[1] > w[0]));
    (x, report)
}

/// Everything the window energy depends on besides the knots.
pub struct WindowProblem<'a> {
    pub config: StateConfig,
    pub prior: &'a HybridPrior,
    pub extrinsics: &'a Extrinsics,
    pub gravity: Gravity,
    pub noise: &'a NoiseModel,
    pub map: &'a VoxelMap,
    /// One batch per segment of the window.
    pub batches: &'a [MeasurementBatch],
    pub marginal: &'a MarginalPrior,
    pub solver: SolverConfig,
    /// Per segment, per LiDAR point: the current plane, if any.
    pub correspondences: Vec<Vec<Option<PlaneCorrespondence>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FactorCounts {
    pub lidar: usize,
    pub gyro: usize,
    pub accel: usize,
    pub prior: usize,
}

struct Accumulator {
    h: DMatrix<f64>,
    g: DVector<f64>,
    energy: f64,
    count: usize,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            g: DVector::zeros(n),
            energy: 0.0,
            count: 0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.h += other.h;
        self.g += other.g;
        self.energy += other.energy;
        self.count += other.count;
        self
    }

    /// Row-wise rank-1 updates restricted to the non-zero columns.
    fn add_whitened(&mut self, jac: &DMatrix<f64>, e: &DVector<f64>) {
        let n = self.h.nrows();
        let mut idx: Vec<usize> = Vec::with_capacity(jac.ncols());
        let mut val: Vec<f64> = Vec::with_capacity(jac.ncols());
        let h = self.h.as_mut_slice();
        let g = self.g.as_mut_slice();
        for r in 0..jac.nrows() {
            idx.clear();
            val.clear();
            for c in 0..jac.ncols() {
                let v = jac[(r, c)];
                if v != 0.0 {
                    idx.push(c);
                    val.push(v);
                }
            }
            for (&j, &vj) in idx.iter().zip(&val) {
                let col = &mut h[j * n..(j + 1) * n];
                for (&i, &vi) in idx.iter().zip(&val) {
                    col[i] += vi * vj;
                }
                g[j] += vj * e[r];
            }
        }
        self.energy += 0.5 * e.norm_squared();
        self.count += 1;
    }
}

impl<'a> WindowProblem<'a> {
    pub fn layout(&self) -> StateLayout {
        self.config.layout()
    }

    /// Finds the plane for every LiDAR point at the current trajectory.
    pub fn associate(&mut self, traj: &Trajectory) {
        let max_d = self.solver.max_point_to_plane;
        self.correspondences = self
            .batches
            .iter()
            .enumerate()
            .map(|(k, batch)| {
                let Ok(seg) = traj.segment(k) else {
                    return vec![None; batch.lidar.len()];
                };
                batch
                    .lidar
                    .par_iter()
                    .map(|pt| {
                        let ext = self.extrinsics.lidar.get(pt.sensor)?;
                        let world = seg.pose_at(pt.t).compose(ext).apply(&pt.point);
                        let c = self.map.plane_at(&world, None)?;
                        (c.signed_distance(&world).abs() <= max_d).then_some(c)
                    })
                    .collect()
            })
            .collect();
    }

    fn segment_system(&self, traj: &Trajectory, k: usize) -> Result<(Accumulator, FactorCounts)> {
        let layout = self.layout();
        let n2 = 2 * layout.dim;
        let seg = traj.segment(k)?;
        let batch = &self.batches[k];
        let sigma_inv = 1.0 / self.noise.lidar_variance().sqrt();
        let mut counts = FactorCounts::default();

        let empty = Vec::new();
        let corr = self.correspondences.get(k).unwrap_or(&empty);
        let lidar = batch
            .lidar
            .par_iter()
            .enumerate()
            .fold(
                || Accumulator::new(n2),
                |mut acc, (i, pt)| {
                    if let (Some(Some(c)), Some(ext)) = (corr.get(i), self.extrinsics.lidar.get(pt.sensor)) {
                        let ip = seg.at(pt.t, false);
                        let mut lin = lidar_residual(&ip, &layout, ext, pt, c);
                        lin.scale(sigma_inv);
                        acc.add_whitened(&lin.jacobian, &lin.residual);
                    }
                    acc
                },
            )
            .reduce(|| Accumulator::new(n2), Accumulator::merge);
        counts.lidar = lidar.count;
        let mut acc = lidar;

        if layout.gyro_count > 0 {
            let w = DMatrix::from_column_slice(3, 3, self.noise.gyro_whitening().as_slice());
            for s in &batch.gyro {
                if s.sensor >= layout.gyro_count {
                    continue;
                }
                let r = self.extrinsics.gyro(s.sensor)?;
                let mut lin = gyro_residual(&seg.at(s.t, true), &layout, r, s);
                lin.whiten(&w);
                acc.add_whitened(&lin.jacobian, &lin.residual);
                counts.gyro += 1;
            }
        }
        if layout.accel_count > 0 {
            let w = DMatrix::from_column_slice(3, 3, self.noise.accel_whitening().as_slice());
            for s in &batch.accel {
                if s.sensor >= layout.accel_count {
                    continue;
                }
                let r = self.extrinsics.accel(s.sensor)?;
                let mut lin = accel_residual(&seg.at(s.t, false), &layout, r, &self.gravity, s);
                lin.whiten(&w);
                acc.add_whitened(&lin.jacobian, &lin.residual);
                counts.accel += 1;
            }
        }

        let knots = traj.knots();
        let pf = gp_prior_residual(&knots[k], &knots[k + 1], &self.config, self.prior)?;
        let l = &pf.linearized;
        let wj = &pf.information * &l.jacobian;
        acc.h.gemm_tr(1.0, &l.jacobian, &wj, 1.0);
        acc.g.gemv_tr(1.0, &wj, &l.residual, 1.0);
        acc.energy += 0.5 * l.residual.dot(&(&pf.information * &l.residual));
        counts.prior += 1;
        Ok((acc, counts))
    }

    fn segment_energy(&self, traj: &Trajectory, k: usize) -> Result<f64> {
        let layout = self.layout();
        let seg = traj.segment(k)?;
        let batch = &self.batches[k];
        let var = self.noise.lidar_variance();
        let empty = Vec::new();
        let corr = self.correspondences.get(k).unwrap_or(&empty);
        let mut e: f64 = batch
            .lidar
            .par_iter()
            .enumerate()
            .map(
                |(i, pt)| match (corr.get(i), self.extrinsics.lidar.get(pt.sensor)) {
                    (Some(Some(c)), Some(ext)) => {
                        let world = seg.pose_at(pt.t).compose(ext).apply(&pt.point);
                        0.5 * c.signed_distance(&world).powi(2) / var
                    }
                    _ => 0.0,
                },
            )
            .sum();
        if layout.gyro_count > 0 {
            let w = self.noise.gyro_whitening();
            for s in batch.gyro.iter().filter(|s| s.sensor < layout.gyro_count) {
                let st = seg.at(s.t, false).state;
                let r = self.extrinsics.gyro(s.sensor)?;
                let res = st.omega + st.gyro_bias[s.sensor] - r * s.value;
                e += 0.5 * (w * res).norm_squared();
            }
        }
        if layout.accel_count > 0 {
            let w = self.noise.accel_whitening();
            for s in batch.accel.iter().filter(|s| s.sensor < layout.accel_count) {
                let st = seg.at(s.t, false).state;
                let r = self.extrinsics.accel(s.sensor)?;
                let res = st.rotation.inverse() * (st.acceleration + self.gravity.0)
                    + st.accel_bias[s.sensor]
                    - r * s.value;
                e += 0.5 * (w * res).norm_squared();
            }
        }
        let knots = traj.knots();
        let pf = gp_prior_residual(&knots[k], &knots[k + 1], &self.config, self.prior)?;
        let r = &pf.linearized.residual;
        e += 0.5 * r.dot(&(&pf.information * r));
        Ok(e)
    }

    /// Normal equations, energy and factor counts at `traj`.
    pub fn build(&self, traj: &Trajectory) -> Result<(NormalEquations, f64, FactorCounts)> {
        let layout = self.layout();
        let mut ne = NormalEquations::new(traj.knots().len(), layout.dim);
        let (mh, mg) = self.marginal.linearize(&traj.knots()[0], &layout);
        ne.add_local(0, &mh, &mg);
        let mut energy = self.marginal.energy(&traj.knots()[0], &layout);
        let mut counts = FactorCounts::default();
        for k in 0..traj.segments() {
            let (acc, c) = self.segment_system(traj, k)?;
            ne.add_local(k, &acc.h, &acc.g);
            energy += acc.energy;
            counts.lidar += c.lidar;
            counts.gyro += c.gyro;
            counts.accel += c.accel;
            counts.prior += c.prior;
        }
        Ok((ne, energy, counts))
    }

    pub fn total_energy(&self, traj: &Trajectory) -> Result<f64> {
        let layout = self.layout();
        let mut e = self.marginal.energy(&traj.knots()[0], &layout);
        for k in 0..traj.segments() {
            e += self.segment_energy(traj, k)?;
        }
        Ok(e)
    }

    /// Information on the second knot after eliminating the first one,
    /// using the marginal prior and every factor of the first segment,
    /// linearized at the current estimate.
    pub fn marginalize_first(&self, traj: &Trajectory) -> Result<(MarginalPrior, usize)> {
        let layout = self.layout();
        let n = layout.dim;
        let knots = traj.knots();
        let (acc, _) = self.segment_system(traj, 0)?;
        let mut h = acc.h;
        let mut g = acc.g;
        let (mh, mg) = self.marginal.linearize(&knots[0], &layout);
        let mut hv = h.view_mut((0, 0), (n, n));
        hv += &mh;
        let mut gv = g.rows_mut(0, n);
        gv += &mg;
        let s = schur_complement(&h, &g, n);
        Ok((
            MarginalPrior {
                linearization: knots[1].clone(),
                information: s.h,
                vector: s.g,
            },
            s.clamped,
        ))
    }
}

impl Problem for WindowProblem<'_> {
    type State = Trajectory;

    fn refresh(&mut self, state: &Trajectory, _iteration: usize) {
        self.associate(state);
    }

    fn energy(&self, state: &Trajectory) -> f64 {
        self.total_energy(state).unwrap_or(f64::INFINITY)
    }

    fn linearize(&self, state: &Trajectory) -> (NormalEquations, f64) {
        match self.build(state) {
            Ok((ne, e, _)) => (ne, e),
            Err(_) => {
                let n = self.layout().dim;
                let blocks = state.knots().len();
                (NormalEquations::new(blocks, n), f64::INFINITY)
            }
        }
    }

    fn retract(&self, state: &Trajectory, delta: &DVector<f64>) -> Trajectory {
        let layout = self.layout();
        let knots = state
            .knots()
            .iter()
            .enumerate()
            .map(|(k, x)| x.retract(&layout, delta.rows(k * layout.dim, layout.dim)))
            .collect();
        let mut out = state.clone();
        out.set_knots(knots);
        out
    }
}

/// Applies a thread-count override from `CTGP_THREADS`, if set.
pub fn configure_threads_from_env() -> Option<usize> {
    let n: usize = std::env::var("CTGP_THREADS").ok()?.trim().parse().ok()?;
    if n == 0 {
        return None;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .ok()
        .map(|_| n)
}

/// Linear-Gaussian chains over vector-valued knots, solved with the same
/// block machinery as the window estimator. Used to check marginalization
/// and Gauss-Newton behaviour against closed-form answers.
pub mod linear {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub struct LinearFactor {
        /// First knot touched; the factor spans `jacobian.ncols() / dim` knots.
        pub first: usize,
        pub jacobian: DMatrix<f64>,
        pub target: DVector<f64>,
        pub information: DMatrix<f64>,
    }

    impl LinearFactor {
        pub fn span(&self, dim: usize) -> usize {
            self.jacobian.ncols() / dim
        }

        fn residual(&self, x: &[DVector<f64>], dim: usize) -> DVector<f64> {
            let mut stacked = DVector::zeros(self.jacobian.ncols());
            for i in 0..self.span(dim) {
                stacked.rows_mut(i * dim, dim).copy_from(&x[self.first + i]);
            }
            &self.jacobian * stacked - &self.target
        }
    }

    /// `½ (x − x̄)ᵀH(x − x̄) + bᵀ(x − x̄)` on one knot.
    #[derive(Debug, Clone, PartialEq)]
    pub struct LinearMarginal {
        pub knot: usize,
        pub linearization: DVector<f64>,
        pub information: DMatrix<f64>,
        pub vector: DVector<f64>,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct LinearChain {
        pub dim: usize,
        pub knots: usize,
        pub factors: Vec<LinearFactor>,
        pub marginal: Option<LinearMarginal>,
    }

    impl LinearChain {
        pub fn new(dim: usize, knots: usize) -> Self {
            Self {
                dim,
                knots,
                factors: Vec::new(),
                marginal: None,
            }
        }

        pub fn add(&mut self, f: LinearFactor) {
            assert!(f.first + f.span(self.dim) <= self.knots);
            self.factors.push(f);
        }

        /// Keeps only the factors inside `[start, start + len)`, re-indexed.
        pub fn window(&self, start: usize, len: usize, marginal: Option<LinearMarginal>) -> Self {
            let factors = self
                .factors
                .iter()
                .filter(|f| f.first >= start && f.first + f.span(self.dim) <= start + len)
                .map(|f| LinearFactor {
                    first: f.first - start,
                    ..f.clone()
                })
                .collect();
            Self {
                dim: self.dim,
                knots: len,
                factors,
                marginal,
            }
        }

        /// MAP estimate by one Gauss-Newton iteration from zero.
        pub fn solve(&self) -> Result<Vec<DVector<f64>>> {
            let x0 = vec![DVector::zeros(self.dim); self.knots];
            let (ne, _) = self.linearize(&x0);
            let dx = ne.solve(0.0)?;
            Ok(self.retract(&x0, &dx))
        }

        /// Eliminates knot 0 and returns the marginal on knot 1 (indexed 0 in
        /// the next window).
        pub fn marginalize_first(&self, x: &[DVector<f64>]) -> LinearMarginal {
            let n = self.dim;
            let mut ne = NormalEquations::new(2, n);
            for f in self.factors.iter().filter(|f| f.first == 0) {
                let span = f.span(n);
                let r = f.residual(x, n);
                let mut j = DMatrix::zeros(f.jacobian.nrows(), 2 * n);
                j.columns_mut(0, span * n).copy_from(&f.jacobian);
                ne.add_factor(0, &j, Some(&f.information), &r);
            }
            if let Some(m) = self.marginal.as_ref().filter(|m| m.knot == 0) {
                let d = &x[0] - &m.linearization;
                let g = &m.information * &d + &m.vector;
                let mut hv = ne.h.view_mut((0, 0), (n, n));
                hv += &m.information;
                let mut gv = ne.g.rows_mut(0, n);
                gv += g;
            }
            let s = schur_complement(&ne.h, &ne.g, n);
            LinearMarginal {
                knot: 0,
                linearization: x[1].clone(),
                information: s.h,
                vector: s.g,
            }
        }
    }

    impl Problem for LinearChain {
        type State = Vec<DVector<f64>>;

        fn energy(&self, x: &Self::State) -> f64 {
            let mut e = 0.0;
            for f in &self.factors {
                let r = f.residual(x, self.dim);
                e += 0.5 * r.dot(&(&f.information * &r));
            }
            if let Some(m) = &self.marginal {
                let d = &x[m.knot] - &m.linearization;
                e += 0.5 * d.dot(&(&m.information * &d)) + m.vector.dot(&d);
            }
            e
        }

        fn linearize(&self, x: &Self::State) -> (NormalEquations, f64) {
            let mut ne = NormalEquations::new(self.knots, self.dim);
            for f in &self.factors {
                let r = f.residual(x, self.dim);
                ne.add_factor(f.first, &f.jacobian, Some(&f.information), &r);
            }
            if let Some(m) = &self.marginal {
                let d = &x[m.knot] - &m.linearization;
                let g = &m.information * &d + &m.vector;
                ne.add_local(m.knot, &m.information, &g);
            }
            (ne, self.energy(x))
        }

        fn retract(&self, x: &Self::State, delta: &DVector<f64>) -> Self::State {
            x.iter()
                .enumerate()
                .map(|(k, v)| v + delta.rows(k * self.dim, self.dim))
                .collect()
        }
    }
}
