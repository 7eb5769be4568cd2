//! Hashed voxel map of world-frame points.
//!
//! Points are never moved once inserted. Neighbour search looks at the query
//! voxel and its six face-adjacent voxels.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hash, Hasher};
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::PlaneCorrespondence;

/// Integer voxel coordinates, `floor(p / size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct VoxelKey(pub [i64; 3]);

impl VoxelKey {
    pub fn of(p: &Vector3<f64>, size: f64) -> Self {
        VoxelKey([
            (p.x / size).floor() as i64,
            (p.y / size).floor() as i64,
            (p.z / size).floor() as i64,
        ])
    }

    pub fn offset(&self, d: [i64; 3]) -> Self {
        VoxelKey([self.0[0] + d[0], self.0[1] + d[1], self.0[2] + d[2]])
    }

    pub fn center(&self, size: f64) -> Vector3<f64> {
        Vector3::new(
            (self.0[0] as f64 + 0.5) * size,
            (self.0[1] as f64 + 0.5) * size,
            (self.0[2] as f64 + 0.5) * size,
        )
    }

    /// Prime-multiplier spatial hash.
    pub fn spatial_hash(&self) -> u64 {
        (self.0[0].wrapping_mul(73_856_093)
            ^ self.0[1].wrapping_mul(19_349_669)
            ^ self.0[2].wrapping_mul(83_492_791)) as u64
    }
}

impl Hash for VoxelKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.spatial_hash());
    }
}

/// Passes the precomputed spatial hash through, with a final avalanche so
/// the table's low bits are well mixed.
#[derive(Default)]
pub struct VoxelHasher(u64);

impl Hasher for VoxelHasher {
    fn finish(&self) -> u64 {
        let mut z = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ b as u64;
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v;
    }
}

type VoxelTable = HashMap<VoxelKey, Voxel, BuildHasherDefault<VoxelHasher>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub voxel_size: f64,
    pub max_points_per_voxel: usize,
    /// Voxels searched per query. Only the 7-voxel stencil is implemented.
    pub search_voxels: usize,
    pub cull_radius: f64,
    pub min_insert_spacing: f64,
    /// Neighbours used to fit a plane.
    pub plane_neighbors: usize,
    /// Smallest over middle eigenvalue must stay below this ratio.
    pub planarity_ratio: f64,
    /// Largest neighbour distance to the fitted plane, metres.
    pub max_plane_distance: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.5,
            max_points_per_voxel: 20,
            search_voxels: 7,
            cull_radius: 100.0,
            min_insert_spacing: 0.05,
            plane_neighbors: 5,
            planarity_ratio: 0.1,
            max_plane_distance: 0.1,
        }
    }
}

impl MapConfig {
    pub fn outdoor() -> Self {
        Self {
            voxel_size: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("cull_radius", self.cull_radius),
            ("planarity_ratio", self.planarity_ratio),
            ("max_plane_distance", self.max_plane_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("map.{name} must be positive, got {v}")));
            }
        }
        if !(self.min_insert_spacing >= 0.0) {
            return Err(Error::Config(
                "map.min_insert_spacing must be non-negative".into(),
            ));
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("map.max_points_per_voxel must be positive".into()));
        }
        if self.search_voxels != 7 {
            return Err(Error::Config(format!(
                "map.search_voxels: only the 7-voxel stencil is supported, got {}",
                self.search_voxels
            )));
        }
        if self.plane_neighbors < 5 {
            return Err(Error::Config("map.plane_neighbors must be at least 5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Voxel {
    points: Vec<Vector3<f64>>,
    /// Global insertion sequence of each point, used to break distance ties.
    order: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertReport {
    pub inserted: usize,
    pub rejected_full: usize,
    pub rejected_spacing: usize,
    pub rejected_non_finite: usize,
}

/// One neighbour returned by [`VoxelMap::nearest_neighbors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub point: Vector3<f64>,
    pub distance_sq: f64,
    pub order: u64,
}

#[derive(Debug, Clone)]
pub struct VoxelMap {
    config: MapConfig,
    voxels: VoxelTable,
    next_order: u64,
}

const STENCIL: [[i64; 3]; 7] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

impl VoxelMap {
    pub fn new(config: MapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            voxels: VoxelTable::default(),
            next_order: 0,
        })
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.voxels.values().map(|v| v.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        VoxelKey::of(p, self.config.voxel_size)
    }

    pub fn voxel_points(&self, key: &VoxelKey) -> &[Vector3<f64>] {
        self.voxels.get(key).map_or(&[], |v| v.points.as_slice())
    }

    /// All points in deterministic order (sorted by voxel key, then insertion).
    pub fn points(&self) -> Vec<Vector3<f64>> {
        let mut keys: Vec<&VoxelKey> = self.voxels.keys().collect();
        keys.sort();
        keys.into_iter()
            .flat_map(|k| self.voxels[k].points.iter().copied())
            .collect()
    }

    pub fn insert<'a>(&mut self, points: impl IntoIterator<Item = &'a Vector3<f64>>) -> InsertReport {
        let mut report = InsertReport::default();
        let spacing_sq = self.config.min_insert_spacing.powi(2);
        for p in points {
            if !p.iter().all(|c| c.is_finite()) {
                report.rejected_non_finite += 1;
                continue;
            }
            let key = self.key_of(p);
            let voxel = self.voxels.entry(key).or_default();
            if voxel.points.len() >= self.config.max_points_per_voxel {
                report.rejected_full += 1;
                continue;
            }
            if spacing_sq > 0.0 && voxel.points.iter().any(|q| (q - p).norm_squared() < spacing_sq) {
                report.rejected_spacing += 1;
                continue;
            }
            voxel.points.push(*p);
            voxel.order.push(self.next_order);
            self.next_order += 1;
            report.inserted += 1;
        }
        report
    }

    /// Up to `k` nearest points among the query voxel and its six face
    /// neighbours, ascending by distance; equal distances keep insertion
    /// order.
    pub fn nearest_neighbors(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let center = self.key_of(query);
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        let before = |a: &Neighbor, b: &Neighbor| {
            a.distance_sq < b.distance_sq || (a.distance_sq == b.distance_sq && a.order < b.order)
        };
        for d in STENCIL {
            let Some(v) = self.voxels.get(&center.offset(d)) else {
                continue;
            };
            for (p, &order) in v.points.iter().zip(&v.order) {
                let n = Neighbor {
                    point: *p,
                    distance_sq: (p - query).norm_squared(),
                    order,
                };
                if best.len() == k && !before(&n, &best[k - 1]) {
                    continue;
                }
                let pos = best.partition_point(|b| before(b, &n));
                best.insert(pos, n);
                best.truncate(k);
            }
        }
        best
    }

    /// Removes voxels whose centres lie strictly farther than the cull radius
    /// from `center`. Returns the number of points removed.
    pub fn cull(&mut self, center: &Vector3<f64>) -> usize {
        let size = self.config.voxel_size;
        let r = self.config.cull_radius;
        let mut removed = 0;
        self.voxels.retain(|k, v| {
            let keep = (k.center(size) - center).norm() <= r;
            if !keep {
                removed += v.points.len();
            }
            keep
        });
        removed
    }

    /// Plane fitted to the nearest neighbours of `query`, if they are planar
    /// enough. `sensor` orients the normal towards the sensor origin.
    pub fn plane_at(
        &self,
        query: &Vector3<f64>,
        sensor: Option<&Vector3<f64>>,
    ) -> Option<PlaneCorrespondence> {
        let nn = self.nearest_neighbors(query, self.config.plane_neighbors);
        if nn.len() < self.config.plane_neighbors {
            return None;
        }
        let pts: Vec<Vector3<f64>> = nn.iter().map(|n| n.point).collect();
        let view = sensor.map(|s| s - query);
        let fit = estimate_normal(&pts, view.as_ref(), &self.config)?;
        fit.valid.then_some(PlaneCorrespondence {
            point: fit.centroid,
            normal: fit.normal,
        })
    }

    /// Order-independent digest of the map contents.
    pub fn fingerprint(&self) -> u64 {
        let mut keys: Vec<&VoxelKey> = self.voxels.keys().collect();
        keys.sort();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for k in keys {
            k.0.hash(&mut h);
            for p in &self.voxels[k].points {
                for c in p.iter() {
                    c.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn write_ply(&self, w: &mut impl Write) -> std::io::Result<()> {
        let pts = self.points();
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", pts.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        writeln!(w, "end_header")?;
        for p in pts {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ply(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Result of a PCA plane fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub centroid: Vector3<f64>,
    /// Ascending covariance eigenvalues.
    pub eigenvalues: [f64; 3],
    pub max_distance: f64,
    pub valid: bool,
}

/// Normal of the best-fit plane through `points` (at least five).
///
/// The normal is the eigenvector of the smallest covariance eigenvalue. It
/// is oriented to have a positive dot product with `view` when given,
/// otherwise so that its first non-negligible component is positive.
pub fn estimate_normal(
    points: &[Vector3<f64>],
    view: Option<&Vector3<f64>>,
    config: &MapConfig,
) -> Option<PlaneFit> {
    if points.len() < 5 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let ev = [
        eig.eigenvalues[idx[0]].max(0.0),
        eig.eigenvalues[idx[1]].max(0.0),
        eig.eigenvalues[idx[2]].max(0.0),
    ];
    let mut normal: Vector3<f64> = eig.eigenvectors.column(idx[0]).normalize();
    let flip = match view {
        Some(v) if v.norm() > 0.0 => normal.dot(v) < 0.0,
        _ => normal.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0),
    };
    if flip {
        normal = -normal;
    }
    let max_distance = points
        .iter()
        .map(|p| normal.dot(&(p - centroid)).abs())
        .fold(0.0, f64::max);
    let valid =
        ev[1] > 1e-6 && ev[0] < config.planarity_ratio * ev[1] && max_distance < config.max_plane_distance;
    Some(PlaneFit {
        normal,
        centroid,
        eigenvalues: ev,
        max_distance,
        valid,
    })
}
