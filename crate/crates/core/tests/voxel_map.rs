mod common;

use common::*;
use ctgp::voxel_map::{MapConfig, VoxelMap};
use nalgebra::Vector3;
use proptest::prelude::*;

#[test]
fn contracts_hold_on_random_cloud() {
    voxel_contracts(41).unwrap();
}

fn point() -> impl Strategy<Value = Vector3<f64>> {
    (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capacity_never_exceeded(pts in prop::collection::vec(point(), 1..2000)) {
        let config = MapConfig::default();
        let mut map = VoxelMap::new(config).unwrap();
        map.insert(pts.iter());
        for p in map.points() {
            prop_assert!(map.voxel_points(&map.key_of(&p)).len() <= config.max_points_per_voxel);
        }
    }

    #[test]
    fn knn_matches_brute_force(pts in prop::collection::vec(point(), 1..1500), q in point(), k in 1usize..10) {
        let mut map = VoxelMap::new(MapConfig::default()).unwrap();
        map.insert(pts.iter());
        let got: Vec<f64> = map.nearest_neighbors(&q, k).iter().map(|n| n.distance_sq).collect();
        let want = brute_force_knn(&map, &q, k);
        prop_assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for w in map.nearest_neighbors(&q, k).windows(2) {
            prop_assert!(w[0].distance_sq <= w[1].distance_sq);
        }
    }

    #[test]
    fn cull_keeps_exactly_the_voxels_within_radius(
        pts in prop::collection::vec((-150.0..150.0f64, -150.0..150.0f64, -5.0..5.0f64), 1..500),
        cx in -20.0..20.0f64, cy in -20.0..20.0f64,
    ) {
        let config = MapConfig::default();
        let pts: Vec<Vector3<f64>> = pts.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect();
        let mut map = VoxelMap::new(config).unwrap();
        map.insert(pts.iter());
        let center = Vector3::new(cx, cy, 0.0);
        map.cull(&center);
        for p in &pts {
            let key = map.key_of(p);
            let inside = (key.center(config.voxel_size) - center).norm() <= config.cull_radius;
            if !inside {
                prop_assert!(map.voxel_points(&key).is_empty());
            }
        }
        for p in map.points() {
            prop_assert!((map.key_of(&p).center(config.voxel_size) - center).norm() <= config.cull_radius);
        }
    }
}
