#![allow(dead_code)]

use std::path::PathBuf;

use ctgp::config::ScenarioConfig;
use ctgp::factors::{
    accel_residual, gp_prior_residual, gyro_residual, lidar_residual, ImuSample, LidarPoint,
    PlaneCorrespondence,
};
use ctgp::gp_interp::{interp_coeffs, RotationSegment};
use ctgp::gp_prior::{process_noise, transition, HybridPrior, NoiseDensity, PriorBlock, PriorKind};
use ctgp::so3::{self, Rotation};
use ctgp::solver::linear::{LinearChain, LinearFactor};
use ctgp::trajectory::{
    Gravity, KnotState, PriorDensities, RigidTransform, RotationModel, SegmentInterp, StateConfig,
    TranslationModel,
};
use ctgp::voxel_map::{MapConfig, VoxelMap};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const KINDS: [PriorKind; 3] = [
    PriorKind::RandomWalk,
    PriorKind::ConstantVelocity,
    PriorKind::ConstantAcceleration,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| s * normal(rng))
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let s = log_uniform(rng, 1e-3, 10.0);
    (&a * a.transpose() + DMatrix::identity(n, n) * 0.5) * s
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

// ---- LTI oracles ----

/// Drift and noise-input matrices of the white-noise-driven integrator chain.
pub fn lti(kind: PriorKind, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = kind.order();
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m - 1 {
        a[(i, i + 1)] = 1.0;
    }
    let mut f = DMatrix::zeros(m, 1);
    f[(m - 1, 0)] = 1.0;
    let eye = DMatrix::identity(n, n);
    (a.kronecker(&eye), f.kronecker(&eye))
}

/// `exp(A t)` by its power series, which terminates for nilpotent `A`.
pub fn expm_nilpotent(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=n {
        term = &term * a * (t / k as f64);
        if term.amax() == 0.0 {
            break;
        }
        out += &term;
    }
    out
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// `∫₀^dt Φ(dt − s) F Qc Fᵀ Φ(dt − s)ᵀ ds` by composite Gauss-Legendre.
pub fn quadrature_q(kind: PriorKind, dt: f64, qc: &DMatrix<f64>) -> DMatrix<f64> {
    let n = qc.nrows();
    let (a, f) = lti(kind, n);
    let g = &f * qc * f.transpose();
    let panels = 8;
    let h = dt / panels as f64;
    let mut q = DMatrix::zeros(a.nrows(), a.nrows());
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let s = mid + 0.5 * h * x;
            let phi = expm_nilpotent(&a, dt - s);
            q += (&phi * &g * phi.transpose()) * (0.5 * h * w);
        }
    }
    q
}

/// Inverse after symmetric diagonal equilibration.
pub fn equilibrated_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = DVector::from_iterator(m.nrows(), (0..m.nrows()).map(|i| 1.0 / m[(i, i)].sqrt()));
    let dm = DMatrix::from_diagonal(&d);
    let scaled = &dm * m * &dm;
    let inv = scaled.cholesky().expect("SPD").inverse();
    &dm * inv * &dm
}

/// `Λ`, `Ψ` from `Ψ = Q(τ)Φ(dt,τ)ᵀQ(dt)⁻¹`, `Λ = Φ(τ) − ΨΦ(dt)` (scalar, unit density).
pub fn general_interp(kind: PriorKind, dt: f64, alpha: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let one = DMatrix::from_element(1, 1, 1.0);
    let (a, _) = lti(kind, 1);
    let tau = alpha * dt;
    let q_tau = quadrature_q(kind, tau, &one);
    let q_dt = quadrature_q(kind, dt, &one);
    let psi = q_tau * expm_nilpotent(&a, dt - tau).transpose() * equilibrated_inverse(&q_dt);
    let lambda = expm_nilpotent(&a, tau) - &psi * expm_nilpotent(&a, dt);
    (lambda, psi)
}

/// Largest entry error after converting derivative rows/columns to
/// dimensionless units (`x_i · dtⁱ`).
pub fn scaled_max_error(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> f64 {
    let m = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let s = dt.powi(i as i32 - j as i32);
            worst = worst.max(((a[(i, j)] - b[(i, j)]) * s).abs());
        }
    }
    worst
}

/// Cubic Hermite basis and its derivative at `alpha` on a segment of length `dt`,
/// as `[[p-row], [v-row]]` coefficient pairs for `(left, right)`.
pub fn hermite_cubic(dt: f64, s: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
    let h10 = s.powi(3) - 2.0 * s * s + s;
    let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
    let h11 = s.powi(3) - s * s;
    let d00 = (6.0 * s * s - 6.0 * s) / dt;
    let d10 = 3.0 * s * s - 4.0 * s + 1.0;
    let d01 = (-6.0 * s * s + 6.0 * s) / dt;
    let d11 = 3.0 * s * s - 2.0 * s;
    let lambda = DMatrix::from_row_slice(2, 2, &[h00, dt * h10, d00, d10]);
    let psi = DMatrix::from_row_slice(2, 2, &[h01, dt * h11, d01, d11]);
    (lambda, psi)
}

/// Value and first `order − 1` derivatives of a polynomial with coefficients `c`.
pub fn poly_derivs(c: &[f64], t: f64, order: usize) -> Vec<f64> {
    let mut coeffs = c.to_vec();
    let mut out = Vec::with_capacity(order);
    for _ in 0..order {
        out.push(coeffs.iter().rev().fold(0.0, |acc, &x| acc * t + x));
        coeffs = coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &x)| i as f64 * x)
            .collect();
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
    }
    out
}

// ---- Table checks ----

/// Worst relative error of `Φ`, `Q` and `Q⁻¹` against the oracles.
pub fn table_one_error(seed: u64, samples: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for kind in KINDS {
        for _ in 0..samples {
            let dt = log_uniform(&mut rng, 1e-3, 2.0);
            let n = rng.random_range(1..=3);
            let qc = random_spd(&mut rng, n);
            let (a, _) = lti(kind, n);
            let phi = transition(kind, n, dt).unwrap();
            worst = worst.max(rel_frobenius(&phi, &expm_nilpotent(&a, dt)));
            let q_ref = quadrature_q(kind, dt, &qc);
            let block = PriorBlock::new(kind, NoiseDensity::new(qc.clone()).unwrap());
            let q = process_noise(kind, dt, &NoiseDensity::new(qc).unwrap()).unwrap();
            worst = worst.max(rel_frobenius(&q, &q_ref));
            let q_inv = block.process_noise_inv(dt).unwrap();
            worst = worst.max(rel_frobenius(&q_inv, &equilibrated_inverse(&q_ref)));
        }
    }
    worst
}

/// Worst scaled error of the closed-form `Λ`/`Ψ` against the general construction.
pub fn table_two_error(seed: u64, samples: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for kind in KINDS {
        for _ in 0..samples {
            let dt = log_uniform(&mut rng, 5e-3, 2.0);
            let alpha: f64 = rng.random_range(0.01..0.99);
            let c = interp_coeffs(kind, dt, alpha * dt).unwrap();
            let (l, p) = general_interp(kind, dt, alpha);
            worst = worst.max(scaled_max_error(&c.lambda, &l, dt));
            worst = worst.max(scaled_max_error(&c.psi, &p, dt));
        }
    }
    worst
}

/// Worst deviation of RW from linear and CV from cubic Hermite interpolation.
pub fn reduction_error(seed: u64, samples: usize) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let dt = log_uniform(&mut rng, 5e-3, 2.0);
        let alpha: f64 = rng.random_range(0.0..1.0);
        let rw = interp_coeffs(PriorKind::RandomWalk, dt, alpha * dt).unwrap();
        worst = worst.max((rw.lambda[(0, 0)] - (1.0 - alpha)).abs());
        worst = worst.max((rw.psi[(0, 0)] - alpha).abs());
        let cv = interp_coeffs(PriorKind::ConstantVelocity, dt, alpha * dt).unwrap();
        let (l, p) = hermite_cubic(dt, alpha);
        worst = worst.max(scaled_max_error(&cv.lambda, &l, dt));
        worst = worst.max(scaled_max_error(&cv.psi, &p, dt));
    }
    worst
}

/// Largest off-band block of the inverse kernel relative to its largest entry,
/// on unit-scale chains where the dense inverse is accurate.
pub fn kernel_offband_ratio(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for knots in 3..=6 {
        for kind in KINDS {
            let q = rng.random_range(0.5..2.0);
            let block = PriorBlock::new(kind, NoiseDensity::isotropic(3, q).unwrap());
            let prior = HybridPrior::new(vec![block]);
            worst = worst.max(offband(&prior, knots, &mut rng));
        }
        let config = StateConfig::full(1, 2, 1).unwrap();
        let unit = PriorDensities {
            rotation: 1.0,
            translation: 1.0,
            gyro_bias: 1.0,
            accel_bias: 1.0,
        };
        let prior = config.hybrid_prior(&unit).unwrap();
        worst = worst.max(offband(&prior, knots, &mut rng));
    }
    worst
}

fn offband(prior: &HybridPrior, knots: usize, rng: &mut ChaCha8Rng) -> f64 {
    let d = prior.dim();
    let mut times = vec![0.0];
    for _ in 1..knots {
        let last = *times.last().unwrap();
        times.push(last + rng.random_range(0.3..1.0));
    }
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let k0 = &a * a.transpose() / d as f64 + DMatrix::identity(d, d);
    let k = prior.kernel_matrix(&times, &k0).unwrap();
    let inv = equilibrated_inverse(&k);
    let scale = inv.amax();
    let mut worst = 0.0f64;
    for i in 0..knots {
        for j in 0..knots {
            if i.abs_diff(j) > 1 {
                worst = worst.max(inv.view((i * d, j * d), (d, d)).amax() / scale);
            }
        }
    }
    worst
}

// ---- Finite differences ----

pub fn central_difference(
    dim: usize,
    h: f64,
    mut f: impl FnMut(&DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let zero = DVector::zeros(dim);
    let rows = f(&zero).len();
    let mut jac = DMatrix::zeros(rows, dim);
    for k in 0..dim {
        let mut plus = zero.clone();
        plus[k] = h;
        let mut minus = zero.clone();
        minus[k] = -h;
        let col = (f(&plus) - f(&minus)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    jac
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    so3::exp(&gauss3(rng, 1.5))
}

/// A random segment whose relative rotation stays well inside the local chart.
pub fn random_pair(rng: &mut ChaCha8Rng, config: &StateConfig) -> (KnotState, KnotState) {
    let layout = config.layout();
    let dt = rng.random_range(0.02..0.2);
    let mut left = KnotState::identity(rng.random_range(-5.0..5.0), &layout);
    left.rotation = random_rotation(rng);
    left.omega = gauss3(rng, 2.0);
    left.position = gauss3(rng, 5.0);
    left.velocity = gauss3(rng, 1.0);
    left.acceleration = gauss3(rng, 1.0);
    for b in left.gyro_bias.iter_mut().chain(left.accel_bias.iter_mut()) {
        *b = gauss3(rng, 0.05);
    }
    let mut right = left.clone();
    right.t = left.t + dt;
    right.rotation = left.rotation * so3::exp(&(left.omega * dt + gauss3(rng, 0.1)));
    right.omega = left.omega + gauss3(rng, 0.5);
    right.position = left.position + left.velocity * dt + gauss3(rng, 0.05);
    right.velocity = left.velocity + gauss3(rng, 0.3);
    right.acceleration = left.acceleration + gauss3(rng, 0.3);
    for b in right.gyro_bias.iter_mut().chain(right.accel_bias.iter_mut()) {
        *b += gauss3(rng, 0.01);
    }
    (left, right)
}

fn perturbed(
    left: &KnotState,
    right: &KnotState,
    config: &StateConfig,
    d: &DVector<f64>,
) -> (KnotState, KnotState) {
    let layout = config.layout();
    let n = layout.dim;
    (
        left.retract(&layout, d.rows(0, n)),
        right.retract(&layout, d.rows(n, n)),
    )
}

#[derive(Debug, Default, Clone)]
pub struct JacobianSummary {
    pub points: usize,
    pub blocks: usize,
    pub worst: f64,
    pub worst_name: String,
}

impl JacobianSummary {
    fn record(&mut self, name: &str, analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) {
        let err = (analytic - numeric).norm() / numeric.norm().max(1e-8);
        self.blocks += 1;
        if err > self.worst {
            self.worst = err;
            self.worst_name = name.to_string();
        }
    }
}

const FD_STEP: f64 = 1e-6;

/// Every analytic Jacobian against central differences at `points` random
/// linearization points, cycling through all state configurations.
pub fn jacobian_suite(seed: u64, points: usize) -> JacobianSummary {
    let mut rng = rng(seed);
    let configs = StateConfig::all_combinations(1, 2, 2);
    let mut summary = JacobianSummary::default();
    for p in 0..points {
        let config = configs[p % configs.len()];
        let layout = config.layout();
        let (left, right) = random_pair(&mut rng, &config);
        let t = left.t + rng.random_range(0.0..1.0) * (right.t - left.t);
        let dim = 2 * layout.dim;
        let eval = |d: &DVector<f64>| {
            let (l, r) = perturbed(&left, &right, &config, d);
            SegmentInterp::new(0, &l, &r, &config).unwrap().at(t, true)
        };
        let ip = eval(&DVector::zeros(dim));

        let extrinsic = RigidTransform::new(random_rotation(&mut rng), gauss3(&mut rng, 0.3));
        let point = LidarPoint::new(t, 0, gauss3(&mut rng, 10.0));
        let corr = PlaneCorrespondence {
            point: gauss3(&mut rng, 10.0),
            normal: gauss3(&mut rng, 1.0).normalize(),
        };
        let a = lidar_residual(&ip, &layout, &extrinsic, &point, &corr).jacobian;
        let n = central_difference(dim, FD_STEP, |d| {
            lidar_residual(&eval(d), &layout, &extrinsic, &point, &corr).residual
        });
        summary.record("lidar", &a, &n);

        if matches!(config.rotation, RotationModel::Gyro { .. }) {
            let ext = random_rotation(&mut rng);
            let sample = ImuSample::new(t, p % 2, gauss3(&mut rng, 2.0));
            let a = gyro_residual(&ip, &layout, &ext, &sample).jacobian;
            let n = central_difference(dim, FD_STEP, |d| {
                gyro_residual(&eval(d), &layout, &ext, &sample).residual
            });
            summary.record("gyro", &a, &n);
        }
        if matches!(config.translation, TranslationModel::Accel { .. }) {
            let ext = random_rotation(&mut rng);
            let gravity = Gravity(Vector3::new(0.0, 0.0, 9.81));
            let sample = ImuSample::new(t, (p + 1) % 2, gauss3(&mut rng, 9.0));
            let a = accel_residual(&ip, &layout, &ext, &gravity, &sample).jacobian;
            let n = central_difference(dim, FD_STEP, |d| {
                accel_residual(&eval(d), &layout, &ext, &gravity, &sample).residual
            });
            summary.record("accel", &a, &n);
        }

        let prior = config.hybrid_prior(&PriorDensities::default()).unwrap();
        let a = gp_prior_residual(&left, &right, &config, &prior)
            .unwrap()
            .linearized
            .jacobian;
        let n = central_difference(dim, FD_STEP, |d| {
            let (l, r) = perturbed(&left, &right, &config, d);
            gp_prior_residual(&l, &r, &config, &prior)
                .unwrap()
                .linearized
                .residual
        });
        summary.record("gp_prior", &a, &n);

        record_remap(&mut summary, &config, &left, &right, ip.alpha);
        summary.points += 1;
    }
    record_so3_helpers(&mut summary, &mut rng, points);
    summary
}

fn record_remap(
    summary: &mut JacobianSummary,
    config: &StateConfig,
    left: &KnotState,
    right: &KnotState,
    alpha: f64,
) {
    let kind = config.rotation_kind();
    let dt = right.t - left.t;
    let build = |d: &DVector<f64>| {
        let rl = left.rotation * so3::exp(&d.fixed_rows::<3>(0).into_owned());
        let wl = left.omega + d.fixed_rows::<3>(3);
        let rr = right.rotation * so3::exp(&d.fixed_rows::<3>(6).into_owned());
        let wr = right.omega + d.fixed_rows::<3>(9);
        RotationSegment::new(kind, dt, &rl, &wl, &rr, &wr)
            .unwrap()
            .evaluate(alpha, true)
    };
    let base = build(&DVector::zeros(12));
    let stack = |blocks: &[Matrix3<f64>; 4]| {
        let mut m = DMatrix::zeros(3, 12);
        for (k, b) in blocks.iter().enumerate() {
            m.view_mut((0, 3 * k), (3, 3)).copy_from(b);
        }
        m
    };
    let r0 = base.rotation;
    let n = central_difference(12, FD_STEP, |d| {
        DVector::from_column_slice(so3::minus(&r0, &build(d).rotation).as_slice())
    });
    summary.record("remap_rotation", &stack(&base.d_rotation), &n);
    if kind != PriorKind::RandomWalk {
        let n = central_difference(12, FD_STEP, |d| {
            DVector::from_column_slice(build(d).omega.as_slice())
        });
        summary.record("remap_omega", &stack(&base.d_omega), &n);
    }
}

fn record_so3_helpers(summary: &mut JacobianSummary, rng: &mut ChaCha8Rng, samples: usize) {
    for _ in 0..samples {
        let mut theta = gauss3(rng, 1.0);
        if theta.norm() > 2.5 {
            theta *= 2.5 / theta.norm();
        }
        let u = gauss3(rng, 1.0);
        let v3 = |d: &DVector<f64>| Vector3::new(d[0], d[1], d[2]);
        let n = central_difference(3, FD_STEP, |d| {
            let m = so3::right_jacobian(&(theta + v3(d))) * u;
            DVector::from_column_slice(m.as_slice())
        });
        let a = so3::right_jacobian_apply_derivative(&theta, &u);
        summary.record("d_jr", &DMatrix::from_column_slice(3, 3, a.as_slice()), &n);
        let n = central_difference(3, FD_STEP, |d| {
            let m = so3::right_jacobian_inv(&(theta + v3(d))).unwrap() * u;
            DVector::from_column_slice(m.as_slice())
        });
        let a = so3::right_jacobian_inv_apply_derivative(&theta, &u);
        summary.record("d_jr_inv", &DMatrix::from_column_slice(3, 3, a.as_slice()), &n);
        let r = so3::exp(&theta);
        let n = central_difference(3, FD_STEP, |d| {
            let m = so3::log(&(r * so3::exp(&v3(d))));
            DVector::from_column_slice(m.as_slice())
        });
        let a = so3::right_jacobian_inv(&theta).unwrap();
        summary.record("log", &DMatrix::from_column_slice(3, 3, a.as_slice()), &n);
    }
}

// ---- Linear-Gaussian chains ----

pub fn random_linear_chain(rng: &mut ChaCha8Rng, dim: usize, knots: usize) -> LinearChain {
    let mut chain = LinearChain::new(dim, knots);
    let unary = |rng: &mut ChaCha8Rng, first: usize, span: usize, rows: usize| LinearFactor {
        first,
        jacobian: DMatrix::from_fn(rows, span * dim, |_, _| normal(rng)),
        target: DVector::from_fn(rows, |_, _| normal(rng)),
        information: random_spd(rng, rows),
    };
    chain.add(unary(rng, 0, 1, dim));
    for k in 0..knots - 1 {
        chain.add(unary(rng, k, 2, dim));
        let rows = rng.random_range(1..=dim);
        chain.add(unary(rng, k + 1, 1, rows));
    }
    chain
}

/// Dense normal-equation solve over all knots at once.
pub fn batch_map(chain: &LinearChain) -> Vec<DVector<f64>> {
    let n = chain.dim * chain.knots;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for f in &chain.factors {
        let mut j = DMatrix::zeros(f.jacobian.nrows(), n);
        j.columns_mut(f.first * chain.dim, f.jacobian.ncols())
            .copy_from(&f.jacobian);
        h += j.transpose() * &f.information * &j;
        g += j.transpose() * &f.information * &f.target;
    }
    let x = h.lu().solve(&g).expect("batch system is regular");
    (0..chain.knots)
        .map(|k| x.rows(k * chain.dim, chain.dim).into_owned())
        .collect()
}

/// Largest gap between sliding-window and batch MAP over chains of 2..=5-knot windows.
pub fn marginalization_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for total in 2..=8 {
        for window in 2..=5.min(total) {
            for dim in [1, 3, 6] {
                let chain = random_linear_chain(&mut rng, dim, total);
                let batch = batch_map(&chain);
                let mut marginal = None;
                let mut last = Vec::new();
                for start in 0..=total - window {
                    let w = chain.window(start, window, marginal.clone());
                    let x = w.solve().unwrap();
                    if start + window < total {
                        marginal = Some(w.marginalize_first(&x));
                    }
                    last = x;
                }
                let offset = total - window;
                for (i, xi) in last.iter().enumerate() {
                    let b = &batch[offset + i];
                    worst = worst.max((xi - b).amax() / b.amax().max(1.0));
                }
            }
        }
    }
    worst
}

// ---- Voxel map ----

/// Nearest neighbours by exhaustive search over the 7-voxel stencil.
pub fn brute_force_knn(map: &VoxelMap, q: &Vector3<f64>, k: usize) -> Vec<f64> {
    let center = map.key_of(q);
    let mut d: Vec<f64> = [
        [0, 0, 0],
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ]
    .iter()
    .flat_map(|o| map.voxel_points(&center.offset(*o)).to_vec())
    .map(|p| (p - q).norm_squared())
    .collect();
    d.sort_by(f64::total_cmp);
    d.truncate(k);
    d
}

/// Capacity, kNN-oracle and culling contracts over a random cloud; returns
/// the first violation.
pub fn voxel_contracts(seed: u64) -> Result<String, String> {
    let mut rng = rng(seed);
    let config = MapConfig::default();
    let mut map = VoxelMap::new(config).unwrap();
    let pts: Vec<Vector3<f64>> = (0..20_000)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)))
        .collect();
    map.insert(pts.iter());
    // a dense burst into one voxel
    let burst: Vec<Vector3<f64>> = (0..200)
        .map(|_| Vector3::from_fn(|_, _| 0.1 + rng.random_range(0.0..0.3)))
        .collect();
    map.insert(burst.iter());
    let key = map.key_of(&Vector3::new(0.25, 0.25, 0.25));
    if map.voxel_points(&key).len() != config.max_points_per_voxel {
        return Err(format!("burst voxel holds {}", map.voxel_points(&key).len()));
    }
    for p in map.points() {
        let n = map.voxel_points(&map.key_of(&p)).len();
        if n > config.max_points_per_voxel {
            return Err(format!("voxel over capacity: {n}"));
        }
    }
    let mut queries = 0;
    for _ in 0..2000 {
        let q = Vector3::from_fn(|_, _| rng.random_range(-3.5..3.5));
        for k in [1, 5, 12] {
            let got: Vec<f64> = map
                .nearest_neighbors(&q, k)
                .iter()
                .map(|n| n.distance_sq)
                .collect();
            let want = brute_force_knn(&map, &q, k);
            if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(format!("kNN mismatch at {q:?}, k={k}"));
            }
            queries += 1;
        }
    }
    let size = config.voxel_size;
    let mut far = VoxelMap::new(config).unwrap();
    let cells: Vec<Vector3<f64>> = (150..260)
        .map(|i| Vector3::new((i as f64 + 0.5) * size, 0.25, 0.25))
        .collect();
    far.insert(cells.iter());
    far.cull(&Vector3::new(0.25, 0.25, 0.25));
    for c in &cells {
        let dist = (c - Vector3::new(0.25, 0.25, 0.25)).norm();
        let kept = !far.voxel_points(&far.key_of(c)).is_empty();
        if kept != (dist <= config.cull_radius) {
            return Err(format!("cull at {dist:.3} m kept={kept}"));
        }
    }
    Ok(format!("{queries} kNN queries, {} voxels", map.voxel_count()))
}

// ---- Scenarios ----

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&scenario_dir().join(format!("{name}.toml")))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}
