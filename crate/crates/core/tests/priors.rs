mod common;

use common::*;
use ctgp::gp_interp::{interp_coeffs, interp_vector};
use ctgp::gp_prior::PriorKind;
use nalgebra::DVector;
use rand::Rng;

#[test]
fn closed_forms_match_quadrature() {
    let err = table_one_error(11, 10);
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn interpolation_matches_general_construction() {
    let err = table_two_error(12, 100);
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn low_orders_reduce_to_linear_and_hermite() {
    let err = reduction_error(13, 100);
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn inverse_kernel_is_block_tridiagonal() {
    let r = kernel_offband_ratio(14);
    assert!(r < 1e-8, "{r:e}");
}

#[test]
fn interpolation_reproduces_polynomials_of_matching_degree() {
    let mut rng = rng(15);
    for (kind, degree) in [
        (PriorKind::RandomWalk, 1),
        (PriorKind::ConstantVelocity, 3),
        (PriorKind::ConstantAcceleration, 5),
    ] {
        let m = kind.order();
        for _ in 0..50 {
            let c: Vec<f64> = (0..=degree).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t0 = rng.random_range(-1.0..1.0);
            let dt = rng.random_range(0.05..1.0);
            let tau = rng.random_range(0.0..dt);
            let left = DVector::from_vec(poly_derivs(&c, t0, m));
            let right = DVector::from_vec(poly_derivs(&c, t0 + dt, m));
            let coeffs = interp_coeffs(kind, dt, tau).unwrap();
            let got = interp_vector(left.as_view(), right.as_view(), &coeffs, 1).unwrap();
            let want = poly_derivs(&c, t0 + tau, m);
            for i in 0..m {
                assert!(
                    (got[i] - want[i]).abs() < 1e-9 * (1.0 + want[i].abs()),
                    "{kind:?} row {i}"
                );
            }
        }
    }
}

#[test]
fn endpoints_reproduce_knots() {
    for kind in KINDS {
        let dt = 0.1;
        let start = interp_coeffs(kind, dt, 0.0).unwrap();
        let end = interp_coeffs(kind, dt, dt).unwrap();
        let eye = nalgebra::DMatrix::identity(kind.order(), kind.order());
        assert!((start.lambda - &eye).amax() < 1e-12 && start.psi.amax() < 1e-12);
        assert!((end.psi - &eye).amax() < 1e-9 && end.lambda.amax() < 1e-9);
    }
}
