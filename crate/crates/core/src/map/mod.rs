//! Incremental world-frame feature map.
//!
//! Edge and planar features live in separate voxel-downsampled stores, each
//! backed by a KD-tree that is rebuilt after every insertion. Local line and
//! plane structure is validated by eigen-analysis of the neighbor covariance.

pub mod kdtree;

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Point;
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::features::FeatureCloud;
use crate::se3::PoseSE3;

pub use kdtree::{KdTree, Neighbor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub color: Option<Rgb>,
}

impl MapPoint {
    pub fn new(position: Vector3<f64>, color: Option<Rgb>) -> Self {
        Self { position, color }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineDirection {
    /// Principal eigenvector of the neighbor covariance.
    #[default]
    Pca,
    /// Farthest minus nearest neighbor.
    TwoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub neighbors: usize,
    pub edge_voxel: f64,
    pub planar_voxel: f64,
    /// Accept a line when `l1 >= edge_ratio * l2`.
    pub edge_ratio: f64,
    /// Accept a plane when `l3 <= plane_ratio * l2` ...
    pub plane_ratio: f64,
    /// ... and `l2 >= plane_min_spread * l1` (rejects collinear neighborhoods) ...
    pub plane_min_spread: f64,
    /// ... and every neighbor is closer than this to the fitted plane.
    pub plane_fit_tol: f64,
    pub line_direction: LineDirection,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            neighbors: 5,
            edge_voxel: 0.1,
            planar_voxel: 0.2,
            edge_ratio: 3.0,
            plane_ratio: 0.1,
            plane_min_spread: 1e-3,
            plane_fit_tol: 0.1,
            line_direction: LineDirection::Pca,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("edge_voxel", self.edge_voxel),
            ("planar_voxel", self.planar_voxel),
            ("edge_ratio", self.edge_ratio),
            ("plane_ratio", self.plane_ratio),
            ("plane_fit_tol", self.plane_fit_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "map.{name} must be > 0, got {v}"
                )));
            }
        }
        if self.neighbors < 3 {
            return Err(Error::InvalidParameter("map.neighbors must be >= 3".into()));
        }
        if !(self.plane_min_spread >= 0.0) {
            return Err(Error::InvalidParameter(
                "map.plane_min_spread must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Eigenvalues (descending) and matching unit eigenvectors (columns) of the
/// neighbor covariance about the centroid.
#[derive(Debug, Clone, Copy)]
pub struct LocalShape {
    pub centroid: Vector3<f64>,
    pub eigenvalues: [f64; 3],
    pub eigenvectors: [Vector3<f64>; 3],
}

pub fn local_shape(points: &[Vector3<f64>]) -> LocalShape {
    let n = points.len().max(1) as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    LocalShape {
        centroid,
        eigenvalues: idx.map(|i| eig.eigenvalues[i]),
        eigenvectors: idx.map(|i| eig.eigenvectors.column(i).normalize()),
    }
}

/// Flips `v` so its first non-negligible component is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    match v.iter().find(|c| c.abs() > 1e-9) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCorrespondence {
    pub query: Vector3<f64>,
    pub neighbors: Vec<MapPoint>,
    pub direction: Vector3<f64>,
    pub anchor: MapPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCorrespondence {
    pub query: Vector3<f64>,
    pub neighbors: Vec<MapPoint>,
    pub normal: Vector3<f64>,
    pub anchor: MapPoint,
}

/// Line test on neighbors sorted by distance to `q`.
pub fn validate_edge(
    q: &Vector3<f64>,
    neighbors: &[MapPoint],
    cfg: &MapConfig,
) -> Option<EdgeCorrespondence> {
    if neighbors.len() < 2 {
        return None;
    }
    let pts: Vec<Vector3<f64>> = neighbors.iter().map(|m| m.position).collect();
    let shape = local_shape(&pts);
    let [l1, l2, _] = shape.eigenvalues;
    if !(l1 > 1e-18 && l1 >= cfg.edge_ratio * l2) {
        return None;
    }
    let dir = match cfg.line_direction {
        LineDirection::Pca => shape.eigenvectors[0],
        LineDirection::TwoPoint => {
            let d = pts[pts.len() - 1] - pts[0];
            let n = d.norm();
            if n == 0.0 {
                return None;
            }
            d / n
        }
    };
    Some(EdgeCorrespondence {
        query: *q,
        neighbors: neighbors.to_vec(),
        direction: canonical_sign(dir),
        anchor: neighbors[0],
    })
}

/// Plane test on neighbors sorted by distance to `q`.
pub fn validate_plane(
    q: &Vector3<f64>,
    neighbors: &[MapPoint],
    cfg: &MapConfig,
) -> Option<PlaneCorrespondence> {
    if neighbors.len() < 3 {
        return None;
    }
    let pts: Vec<Vector3<f64>> = neighbors.iter().map(|m| m.position).collect();
    let shape = local_shape(&pts);
    let [l1, l2, l3] = shape.eigenvalues;
    if !(l2 > 0.0 && l3 <= cfg.plane_ratio * l2 && l2 >= cfg.plane_min_spread * l1) {
        return None;
    }
    let normal = canonical_sign(shape.eigenvectors[2]);
    if pts
        .iter()
        .any(|p| (p - shape.centroid).dot(&normal).abs() >= cfg.plane_fit_tol)
    {
        return None;
    }
    Some(PlaneCorrespondence {
        query: *q,
        neighbors: neighbors.to_vec(),
        normal,
        anchor: neighbors[0],
    })
}

type VoxelKey = (i64, i64, i64);

/// Voxel-downsampled point store with a KD-tree index.
#[derive(Debug, Clone)]
pub struct VoxelStore {
    voxel: f64,
    points: Vec<MapPoint>,
    slots: HashMap<VoxelKey, usize>,
    tree: KdTree,
}

impl VoxelStore {
    pub fn new(voxel: f64) -> Self {
        Self {
            voxel,
            points: Vec::new(),
            slots: HashMap::new(),
            tree: KdTree::default(),
        }
    }

    pub fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        let f = |c: f64| (c / self.voxel).floor() as i64;
        (f(p.x), f(p.y), f(p.z))
    }

    fn center(&self, k: VoxelKey) -> Vector3<f64> {
        Vector3::new(k.0 as f64 + 0.5, k.1 as f64 + 0.5, k.2 as f64 + 0.5) * self.voxel
    }

    /// Adds points; each voxel keeps the point nearest its center. The index is
    /// rebuilt once at the end.
    pub fn extend(&mut self, pts: impl IntoIterator<Item = MapPoint>) {
        for mp in pts {
            if !mp.position.iter().all(|c| c.is_finite()) {
                continue;
            }
            let key = self.key(&mp.position);
            let center = self.center(key);
            match self.slots.get(&key) {
                Some(&slot) => {
                    let old = (self.points[slot].position - center).norm_squared();
                    if (mp.position - center).norm_squared() < old {
                        self.points[slot] = mp;
                    }
                }
                None => {
                    self.slots.insert(key, self.points.len());
                    self.points.push(mp);
                }
            }
        }
        self.tree = KdTree::build(self.points.iter().map(|m| m.position).collect());
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `k` nearest stored points with their squared distances, ascending.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(MapPoint, f64)> {
        self.tree
            .knn(q, k)
            .into_iter()
            .map(|n| (self.points[n.index], n.dist2))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPart {
    Edge,
    Planar,
}

#[derive(Debug, Clone)]
pub struct GlobalMap {
    cfg: MapConfig,
    edges: VoxelStore,
    planars: VoxelStore,
}

impl GlobalMap {
    pub fn new(cfg: MapConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            edges: VoxelStore::new(cfg.edge_voxel),
            planars: VoxelStore::new(cfg.planar_voxel),
            cfg,
        })
    }

    pub fn config(&self) -> &MapConfig {
        &self.cfg
    }

    pub fn store(&self, part: MapPart) -> &VoxelStore {
        match part {
            MapPart::Edge => &self.edges,
            MapPart::Planar => &self.planars,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.planars.is_empty()
    }

    /// Inserts world-frame points.
    pub fn insert_world(&mut self, edges: &[MapPoint], planars: &[MapPoint]) {
        self.edges.extend(edges.iter().copied());
        self.planars.extend(planars.iter().copied());
    }

    /// Transforms sensor-frame features by `pose` and inserts them.
    pub fn insert(&mut self, features: &FeatureCloud, pose: &PoseSE3) {
        let world = |p: &Point| MapPoint::new(pose.transform_point(&p.position), p.color);
        let e: Vec<MapPoint> = features.edges.iter().map(world).collect();
        let h: Vec<MapPoint> = features.planars.iter().map(world).collect();
        self.insert_world(&e, &h);
    }

    pub fn knn(&self, part: MapPart, q: &Vector3<f64>, n: usize) -> Vec<MapPoint> {
        self.store(part)
            .knn(q, n)
            .into_iter()
            .map(|(m, _)| m)
            .collect()
    }

    fn gated_neighbors(
        &self,
        part: MapPart,
        q: &Vector3<f64>,
        max_nn_dist: f64,
    ) -> Option<Vec<MapPoint>> {
        let found = self.store(part).knn(q, self.cfg.neighbors);
        if found.len() < self.cfg.neighbors || found[0].1 > max_nn_dist * max_nn_dist {
            return None;
        }
        Some(found.into_iter().map(|(m, _)| m).collect())
    }

    pub fn edge_correspondence(
        &self,
        q: &Vector3<f64>,
        max_nn_dist: f64,
    ) -> Option<EdgeCorrespondence> {
        validate_edge(
            q,
            &self.gated_neighbors(MapPart::Edge, q, max_nn_dist)?,
            &self.cfg,
        )
    }

    pub fn plane_correspondence(
        &self,
        q: &Vector3<f64>,
        max_nn_dist: f64,
    ) -> Option<PlaneCorrespondence> {
        validate_plane(
            q,
            &self.gated_neighbors(MapPart::Planar, q, max_nn_dist)?,
            &self.cfg,
        )
    }
}
