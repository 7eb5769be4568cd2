mod common;

use common::*;

#[test]
fn sliding_window_matches_dense_batch() {
    let err = marginalization_error(31);
    assert!(err < 1e-7, "{err:e}");
}

#[test]
fn library_batch_solve_matches_dense_oracle() {
    let mut rng = rng(32);
    for knots in 2..=5 {
        let chain = random_linear_chain(&mut rng, 4, knots);
        let a = chain.solve().unwrap();
        let b = batch_map(&chain);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).amax() < 1e-9 * y.amax().max(1.0));
        }
    }
}
