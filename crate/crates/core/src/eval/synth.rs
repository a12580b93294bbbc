//! Synthetic piecewise-planar scenes, ray-cast LiDAR scans and rendered
//! camera images with exact ground truth.
//!
//! Scan pattern: each scan line is a fan of rays lying in one plane through
//! the sensor origin, so a line crosses any planar surface along a straight
//! segment. Line `l` has elevation `phi_l`, ray `i` of the line has azimuth
//! `alpha_i`:
//! `d = cos(alpha) * (cos(phi), 0, sin(phi)) + sin(alpha) * (0, 1, 0)`.

use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Image, Point};
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_scan_ply};
use crate::par;
use crate::se3::PoseSE3;
use crate::trajectory::{format_seconds, Trajectory};

/// Rectangle `origin + s u + t v`, `s in [0, extent_u]`, `t in [0, extent_v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub origin: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    pub extent_u: f64,
    pub extent_v: f64,
    pub albedo_rgb: [u8; 3],
}

/// Patch with orthonormalized axes, ready for intersection.
#[derive(Debug, Clone, Copy)]
struct Surface {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    n: Vector3<f64>,
    eu: f64,
    ev: f64,
    albedo: Rgb,
}

impl Surface {
    fn from_patch(p: &Patch) -> Result<Self> {
        let u = Vector3::from(p.u_axis);
        let v = Vector3::from(p.v_axis);
        let bad = |why: &str| Error::InvalidParameter(format!("patch at {:?}: {why}", p.origin));
        if !(u.norm() > 0.0 && v.norm() > 0.0) {
            return Err(bad("zero axis"));
        }
        let u = u.normalize();
        let v = v - u * u.dot(&v);
        if v.norm() < 1e-9 {
            return Err(bad("parallel axes"));
        }
        let v = v.normalize();
        if !(p.extent_u > 0.0 && p.extent_v > 0.0) {
            return Err(bad("extent must be > 0"));
        }
        Ok(Self {
            origin: Vector3::from(p.origin),
            u,
            v,
            n: u.cross(&v),
            eu: p.extent_u,
            ev: p.extent_v,
            albedo: Rgb::from(p.albedo_rgb),
        })
    }

    fn intersect(&self, s: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let den = d.dot(&self.n);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = (self.origin - s).dot(&self.n) / den;
        if !(t > 1e-9) {
            return None;
        }
        let h = s + d * t - self.origin;
        let (a, b) = (h.dot(&self.u), h.dot(&self.v));
        (a >= 0.0 && a <= self.eu && b >= 0.0 && b <= self.ev).then_some(t)
    }

    fn distance(&self, p: &Vector3<f64>) -> f64 {
        let h = p - self.origin;
        let a = h.dot(&self.u).clamp(0.0, self.eu);
        let b = h.dot(&self.v).clamp(0.0, self.ev);
        (p - (self.origin + self.u * a + self.v * b)).norm()
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// The six faces of an axis-aligned cuboid.
pub fn cuboid(min: [f64; 3], max: [f64; 3], albedo: [u8; 3]) -> Vec<Patch> {
    let [x0, y0, z0] = min;
    let [x1, y1, z1] = max;
    let (dx, dy, dz) = (x1 - x0, y1 - y0, z1 - z0);
    let p = |o: [f64; 3], u: [f64; 3], v: [f64; 3], eu: f64, ev: f64| Patch {
        origin: o,
        u_axis: u,
        v_axis: v,
        extent_u: eu,
        extent_v: ev,
        albedo_rgb: albedo,
    };
    let (x, y, z) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    vec![
        p([x0, y0, z0], y, z, dy, dz),
        p([x1, y0, z0], y, z, dy, dz),
        p([x0, y0, z0], x, z, dx, dz),
        p([x0, y1, z0], x, z, dx, dz),
        p([x0, y0, z0], x, y, dx, dy),
        p([x0, y0, z1], x, y, dx, dy),
    ]
}

/// One bounding plane of a convex room: points `p` with `normal . p <= offset`
/// are inside. `normal` need not be unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomFace {
    pub normal: [f64; 3],
    pub offset: f64,
}

/// Tiles the faces of the convex room bounded by `faces` with square patches
/// of side `tile`, coloring them from `palette` in a checker-like pattern.
/// Tiles may stick out past a face boundary; from inside the room those parts
/// are hidden behind the neighboring faces. Faces that do not touch the room
/// produce no patches.
pub fn convex_room(faces: &[RoomFace], tile: f64, palette: &[[u8; 3]]) -> Vec<Patch> {
    let planes: Vec<(Vector3<f64>, f64)> = faces
        .iter()
        .map(|f| {
            let n = Vector3::from(f.normal);
            let len = n.norm();
            (n / len, f.offset / len)
        })
        .collect();
    let mut out = Vec::new();
    for (i, &(n, d)) in planes.iter().enumerate() {
        let seed = if n.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = n.cross(&seed).normalize();
        let v = n.cross(&u);
        let c = n * d;
        let big = 1e3;
        let mut poly: Vec<Vector3<f64>> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .iter()
            .map(|&(a, b)| c + u * (a * big) + v * (b * big))
            .collect();
        for (j, &(m, e)) in planes.iter().enumerate() {
            if j != i {
                poly = clip_polygon(&poly, &m, e);
            }
        }
        if poly.len() < 3 {
            continue;
        }
        let (mut a0, mut a1, mut b0, mut b1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &poly {
            let h = p - c;
            a0 = a0.min(h.dot(&u));
            a1 = a1.max(h.dot(&u));
            b0 = b0.min(h.dot(&v));
            b1 = b1.max(h.dot(&v));
        }
        let na = ((a1 - a0) / tile).ceil().max(1.0) as usize;
        let nb = ((b1 - b0) / tile).ceil().max(1.0) as usize;
        for ia in 0..na {
            for ib in 0..nb {
                let o = c + u * (a0 + ia as f64 * tile) + v * (b0 + ib as f64 * tile);
                out.push(Patch {
                    origin: o.into(),
                    u_axis: u.into(),
                    v_axis: v.into(),
                    extent_u: tile,
                    extent_v: tile,
                    albedo_rgb: palette[(i + 2 * ia + 3 * ib) % palette.len()],
                });
            }
        }
    }
    out
}

/// Keeps the part of a convex polygon with `n . p <= d`.
fn clip_polygon(poly: &[Vector3<f64>], n: &Vector3<f64>, d: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for (k, a) in poly.iter().enumerate() {
        let b = &poly[(k + 1) % poly.len()];
        let (fa, fb) = (n.dot(a) - d, n.dot(b) - d);
        if fa <= 0.0 {
            out.push(*a);
        }
        if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
            out.push(a + (b - a) * (fa / (fa - fb)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarPattern {
    pub h_fov_deg: f64,
    pub v_fov_deg: f64,
    pub lines: usize,
    pub points_per_line: usize,
    /// Standard deviation of additive range noise (meters).
    pub range_noise: f64,
    pub max_range: f64,
    /// Shift each line's azimuths by a different fraction of the azimuth
    /// step (golden-ratio sequence) instead of repeating the same columns.
    pub stagger: bool,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            h_fov_deg: 70.4,
            v_fov_deg: 77.2,
            lines: 64,
            points_per_line: 144,
            range_noise: 0.005,
            max_range: 60.0,
            stagger: true,
        }
    }
}

impl LidarPattern {
    /// Unit ray directions in acquisition order.
    pub fn rays(&self) -> Vec<Vector3<f64>> {
        let step = |fov: f64, n: usize, i: usize| {
            if n <= 1 {
                0.0
            } else {
                (-0.5 * fov + fov * i as f64 / (n - 1) as f64).to_radians()
            }
        };
        let da = step(self.h_fov_deg, self.points_per_line, 1)
            - step(self.h_fov_deg, self.points_per_line, 0);
        let mut out = Vec::with_capacity(self.lines * self.points_per_line);
        for l in 0..self.lines {
            let phi = step(self.v_fov_deg, self.lines, l);
            let base = Vector3::new(phi.cos(), 0.0, phi.sin());
            let shift = if self.stagger {
                ((l as f64 * 0.618_033_988_749_895).fract() - 0.5) * da
            } else {
                0.0
            };
            for i in 0..self.points_per_line {
                let a = step(self.h_fov_deg, self.points_per_line, i) + shift;
                out.push(base * a.cos() + Vector3::y() * a.sin());
            }
        }
        out
    }
}

/// Default camera: 320x240, mild barrel distortion, looking along LiDAR +x.
pub fn default_camera() -> CameraModel {
    // camera x = -lidar y, camera y = -lidar z, camera z = lidar x
    let r = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let t_cl = PoseSE3::new(r, Vector3::new(0.0, -0.05, -0.1));
    CameraModel::new(
        160.0,
        160.0,
        160.0,
        120.0,
        [-0.02, 0.0, 0.0, 0.0, 0.0],
        t_cl,
        320,
        240,
    )
    .expect("valid default camera")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time_s: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub patches: Vec<Patch>,
    pub waypoints: Vec<Waypoint>,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default)]
    pub lidar: LidarPattern,
    /// Calibration in the same layout as the calibration file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<serde_json::Value>,
    /// Offset of each image timestamp relative to its scan.
    #[serde(default)]
    pub image_offset_ms: f64,
}

fn default_rate() -> f64 {
    10.0
}

/// A scene with its ground-truth sensor trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub patches: Vec<Patch>,
    surfaces: Vec<Surface>,
    pub trajectory: Trajectory,
    pub lidar: LidarPattern,
    pub camera: CameraModel,
    pub image_offset_ns: i64,
}

impl SyntheticScene {
    pub fn new(
        patches: Vec<Patch>,
        trajectory: Trajectory,
        lidar: LidarPattern,
        camera: CameraModel,
    ) -> Result<Self> {
        let surfaces = patches
            .iter()
            .map(Surface::from_patch)
            .collect::<Result<Vec<_>>>()?;
        if trajectory
            .poses
            .windows(2)
            .any(|w| w[1].timestamp_ns <= w[0].timestamp_ns)
        {
            return Err(Error::InvalidParameter(
                "trajectory timestamps must increase".into(),
            ));
        }
        Ok(Self {
            patches,
            surfaces,
            trajectory,
            lidar,
            camera,
            image_offset_ns: 2_000_000,
        })
    }

    pub fn from_file(f: &SceneFile) -> Result<Self> {
        if f.waypoints.is_empty() {
            return Err(Error::InvalidParameter("scene has no waypoints".into()));
        }
        if !(f.rate_hz > 0.0) {
            return Err(Error::InvalidParameter("rate_hz must be > 0".into()));
        }
        let camera = match &f.camera {
            Some(v) => CameraModel::from_json(&v.to_string())?,
            None => default_camera(),
        };
        let mut scene = Self::new(
            f.patches.clone(),
            interpolate(&f.waypoints, f.rate_hz)?,
            f.lidar.clone(),
            camera,
        )?;
        scene.image_offset_ns = (f.image_offset_ms * 1e6).round() as i64;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: SceneFile = serde_json::from_str(&text)
            .map_err(|e| Error::malformed("scene", path, e.to_string()))?;
        Self::from_file(&f)
    }

    /// Closed convex room, 11 m deep, whose far end is two large facets
    /// folded into a V and tilted up and down, tiled in 2 m colored squares.
    /// The sensor moves 0.1 m per frame along +x with gentle lateral,
    /// vertical and roll/pitch/yaw motion.
    pub fn faceted_room(frames: usize) -> Self {
        let palette: [[u8; 3]; 8] = [
            [200, 60, 50],
            [60, 170, 80],
            [50, 80, 200],
            [220, 180, 40],
            [160, 60, 170],
            [40, 170, 170],
            [230, 130, 70],
            [110, 110, 110],
        ];
        let facet = |yaw: f64, pitch: f64| {
            let (a, b) = (yaw.to_radians(), pitch.to_radians());
            RoomFace {
                normal: [a.cos() * b.cos(), a.sin() * b.cos(), b.sin()],
                offset: 11.0,
            }
        };
        let faces = [
            RoomFace {
                normal: [0.0, 0.0, -1.0],
                offset: 6.0,
            },
            RoomFace {
                normal: [0.0, 0.0, 1.0],
                offset: 6.0,
            },
            RoomFace {
                normal: [-1.0, 0.0, 0.0],
                offset: 4.0,
            },
            RoomFace {
                normal: [0.0, 1.0, 0.0],
                offset: 7.0,
            },
            RoomFace {
                normal: [0.0, -1.0, 0.0],
                offset: 7.0,
            },
            facet(40.0, 25.0),
            facet(-40.0, -25.0),
        ];
        let p = convex_room(&faces, 2.0, &palette);
        Self::new(
            p,
            wobble_trajectory(frames),
            LidarPattern::default(),
            default_camera(),
        )
        .expect("built-in scene is valid")
    }

    /// Axis-aligned bounds of all patches.
    pub fn bounds(&self) -> Aabb {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for s in &self.surfaces {
            for (a, b) in [(0.0, 0.0), (s.eu, 0.0), (0.0, s.ev), (s.eu, s.ev)] {
                let c = s.origin + s.u * a + s.v * b;
                min = min.inf(&c);
                max = max.sup(&c);
            }
        }
        Aabb { min, max }
    }

    /// Nearest hit along a world ray: `(distance, albedo)`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Rgb)> {
        let mut best: Option<(f64, Rgb)> = None;
        for s in &self.surfaces {
            if let Some(t) = s.intersect(origin, dir) {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, s.albedo));
                }
            }
        }
        best
    }

    /// Distance from a world point to the nearest surface.
    pub fn distance_to_surfaces(&self, p: &Vector3<f64>) -> f64 {
        self.surfaces
            .iter()
            .map(|s| s.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Ray-cast scan at sensor pose `pose` (sensor to world). Range noise is
    /// drawn from `rng` in ray order.
    pub fn scan(&self, pose: &PoseSE3, timestamp_ns: i64, rng: &mut impl Rng) -> Vec<Point> {
        let rays = self.lidar.rays();
        let hits = par::map(&rays, |d| {
            let wd = pose.rotation * d;
            self.raycast(&pose.translation, &wd)
                .filter(|(t, _)| *t <= self.lidar.max_range)
        });
        let noise = Normal::new(0.0, self.lidar.range_noise.max(0.0)).expect("finite sigma");
        let mut out = Vec::with_capacity(rays.len());
        for (d, hit) in rays.iter().zip(hits) {
            let Some((t, albedo)) = hit else { continue };
            let r = if self.lidar.range_noise > 0.0 {
                t + noise.sample(rng)
            } else {
                t
            };
            let luma = (albedo.r as f64 + albedo.g as f64 + albedo.b as f64) / (3.0 * 255.0);
            let mut p = Point::new(d * r, 0.1 + 0.9 * luma);
            p.timestamp_ns = timestamp_ns;
            out.push(p);
        }
        out
    }

    /// Renders the camera image for LiDAR pose `pose` by casting one ray per
    /// pixel. Pixels that see nothing are black.
    pub fn render(&self, pose: &PoseSE3, timestamp_ns: i64) -> Image {
        let cam = &self.camera;
        let world_from_cam = *pose * cam.t_cl.inverse();
        let pixels: Vec<u32> = (0..cam.width * cam.height).collect();
        let colors = par::map(&pixels, |&i| {
            let (col, row) = (i % cam.width, i / cam.width);
            let ray = world_from_cam.rotation * cam.pixel_ray(col as f64, row as f64);
            self.raycast(&world_from_cam.translation, &ray.normalize())
                .map_or(Rgb::default(), |(_, c)| c)
        });
        Image::new(cam.width, cam.height, colors, timestamp_ns).expect("buffer matches size")
    }
}

/// 0.1 m per frame along +x with gentle lateral, vertical and
/// roll/pitch/yaw motion, 10 Hz.
fn wobble_trajectory(frames: usize) -> Trajectory {
    let mut traj = Trajectory::default();
    for k in 0..frames {
        let s = k as f64;
        let w = std::f64::consts::TAU * s / 50.0;
        let pose = PoseSE3::from_rpy(
            (1.0f64).to_radians() * (2.0 * w).sin(),
            (1.5f64).to_radians() * w.cos(),
            (5.0f64).to_radians() * w.sin(),
            Vector3::new(0.1 * s, 0.4 * w.sin(), 0.1 * (2.0 * w).sin()),
        );
        traj.push(1_000_000_000 + k as i64 * 100_000_000, pose);
    }
    traj
}

/// Samples waypoints at `rate_hz`, interpolating position linearly and
/// orientation by slerp.
pub fn interpolate(waypoints: &[Waypoint], rate_hz: f64) -> Result<Trajectory> {
    if waypoints.windows(2).any(|w| !(w[1].time_s > w[0].time_s)) {
        return Err(Error::InvalidParameter(
            "waypoint times must increase".into(),
        ));
    }
    let pose_of = |w: &Waypoint| {
        let [r, p, y] = w.rpy_deg.map(f64::to_radians);
        (
            Vector3::from(w.position),
            UnitQuaternion::from_euler_angles(r, p, y),
        )
    };
    let t0 = waypoints[0].time_s;
    let t1 = waypoints[waypoints.len() - 1].time_s;
    let n = ((t1 - t0) * rate_hz + 1e-9).floor() as usize + 1;
    let mut traj = Trajectory::default();
    let mut seg = 0;
    for k in 0..n {
        let t = t0 + k as f64 / rate_hz;
        while seg + 2 < waypoints.len() && t > waypoints[seg + 1].time_s {
            seg += 1;
        }
        let (a, b) = (
            &waypoints[seg],
            &waypoints[(seg + 1).min(waypoints.len() - 1)],
        );
        let (pa, qa) = pose_of(a);
        let (pb, qb) = pose_of(b);
        let s = if b.time_s > a.time_s {
            ((t - a.time_s) / (b.time_s - a.time_s)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = qa.try_slerp(&qb, s, 1e-12).unwrap_or(qa);
        traj.push(
            (t * 1e9).round() as i64,
            PoseSE3::from_quaternion(&q, pa.lerp(&pb, s)),
        );
    }
    Ok(traj)
}

/// Replaces `round(fraction * N)` uniformly chosen points with points drawn
/// uniformly from `bounds` (world frame), expressed in the sensor frame via
/// `world_to_sensor`. Replaced points lose their color.
pub fn inject_outliers(
    scan: &[Point],
    fraction: f64,
    seed: u64,
    bounds: &Aabb,
    world_to_sensor: &PoseSE3,
) -> Result<Vec<Point>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "outlier fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (fraction * scan.len() as f64).round() as usize;
    let mut out = scan.to_vec();
    for i in rand::seq::index::sample(&mut rng, scan.len(), count).into_vec() {
        let w = Vector3::new(
            rng.random_range(bounds.min.x..=bounds.max.x),
            rng.random_range(bounds.min.y..=bounds.max.y),
            rng.random_range(bounds.min.z..=bounds.max.z),
        );
        out[i].position = world_to_sensor.transform_point(&w);
        out[i].color = None;
    }
    Ok(out)
}

/// Files produced by [`generate`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub calibration: PathBuf,
    pub ground_truth: PathBuf,
}

/// Writes scans, images, manifest, calibration and ground truth under `out`.
/// The same scene and seed produce byte-identical files.
pub fn generate(scene: &SyntheticScene, seed: u64, out: &Path) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out.join("scans")).map_err(|e| Error::io(out, e))?;
    std::fs::create_dir_all(out.join("images")).map_err(|e| Error::io(out, e))?;
    let mut manifest = csv::Writer::from_writer(Vec::new());
    let row = |w: &mut csv::Writer<Vec<u8>>, kind: &str, ts: i64, path: &str| {
        w.write_record([kind, &ts.to_string(), path])
            .map_err(|e| Error::InvalidParameter(format!("manifest: {e}")))
    };
    manifest
        .write_record(["kind", "timestamp_ns", "path"])
        .map_err(|e| Error::InvalidParameter(format!("manifest: {e}")))?;
    for (k, sp) in scene.trajectory.poses.iter().enumerate() {
        let scan = scene.scan(&sp.pose, sp.timestamp_ns, &mut rng);
        if scan.is_empty() {
            log::warn!("frame {k}: scan hit no surface");
        }
        let scan_rel = format!("scans/{k:06}.ply");
        write_scan_ply(&out.join(&scan_rel), &scan)?;
        let img_ts = sp.timestamp_ns + scene.image_offset_ns;
        let img_rel = format!("images/{k:06}.png");
        scene.render(&sp.pose, img_ts).save(&out.join(&img_rel))?;
        row(&mut manifest, "lidar", sp.timestamp_ns, &scan_rel)?;
        row(&mut manifest, "image", img_ts, &img_rel)?;
    }
    let bytes = manifest
        .into_inner()
        .map_err(|e| Error::InvalidParameter(format!("manifest: {e}")))?;
    let ds = Dataset {
        root: out.to_path_buf(),
        manifest: out.join("manifest.csv"),
        calibration: out.join("calib.json"),
        ground_truth: out.join("groundtruth.tum"),
    };
    write_atomic(&ds.manifest, &bytes)?;
    write_atomic(&ds.calibration, scene.camera.to_json().as_bytes())?;
    scene.trajectory.write_tum(&ds.ground_truth, &[])?;
    log::info!(
        "wrote {} frames ({} .. {}) to {}",
        scene.trajectory.len(),
        scene
            .trajectory
            .poses
            .first()
            .map_or(String::new(), |p| format_seconds(p.timestamp_ns)),
        scene
            .trajectory
            .poses
            .last()
            .map_or(String::new(), |p| format_seconds(p.timestamp_ns)),
        out.display()
    );
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_scan_lies_on_surfaces() {
        let mut scene = SyntheticScene::faceted_room(3);
        scene.lidar.range_noise = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for sp in &scene.trajectory.poses {
            let scan = scene.scan(&sp.pose, sp.timestamp_ns, &mut rng);
            assert!(scan.len() > 1000);
            for p in &scan {
                assert!(scene.distance_to_surfaces(&sp.pose.transform_point(&p.position)) < 1e-9);
            }
        }
    }

    #[test]
    fn red_wall_renders_red() {
        let wall = Patch {
            origin: [2.0, -50.0, -50.0],
            u_axis: [0.0, 1.0, 0.0],
            v_axis: [0.0, 0.0, 1.0],
            extent_u: 100.0,
            extent_v: 100.0,
            albedo_rgb: [255, 0, 0],
        };
        let mut traj = Trajectory::default();
        traj.push(0, PoseSE3::identity());
        let scene =
            SyntheticScene::new(vec![wall], traj, LidarPattern::default(), default_camera())
                .unwrap();
        let img = scene.render(&PoseSE3::identity(), 0);
        assert!(img.pixels.iter().all(|c| *c == Rgb::new(255, 0, 0)));
    }

    #[test]
    fn rays_follow_the_pattern() {
        let pat = LidarPattern::default();
        let rays = pat.rays();
        assert_eq!(rays.len(), pat.lines * pat.points_per_line);
        for r in &rays {
            assert!((r.norm() - 1.0).abs() < 1e-12);
            let h = r.y.atan2(r.x.hypot(r.z)).to_degrees();
            let v = r.z.atan2(r.x).to_degrees();
            assert!(h.abs() <= 35.2 + 0.5 * 70.4 / 143.0 + 1e-9 && v.abs() <= 38.6 + 1e-9);
        }
        // every ray of a line lies in that line's plane
        let n = rays[0].cross(&rays[pat.points_per_line - 1]).normalize();
        for r in &rays[..pat.points_per_line] {
            assert!(r.dot(&n).abs() < 1e-12);
        }
    }

    #[test]
    fn convex_room_is_closed() {
        let faces = [
            RoomFace {
                normal: [0.0, 0.0, -1.0],
                offset: 2.0,
            },
            RoomFace {
                normal: [0.0, 0.0, 2.0],
                offset: 6.0,
            },
            RoomFace {
                normal: [-1.0, 0.0, 0.0],
                offset: 3.0,
            },
            RoomFace {
                normal: [1.0, 1.0, 0.0],
                offset: 5.0,
            },
            RoomFace {
                normal: [1.0, -1.0, 0.3],
                offset: 5.0,
            },
            RoomFace {
                normal: [0.0, 1.0, 0.0],
                offset: 100.0,
            },
        ];
        let patches = convex_room(&faces, 1.5, &[[10, 20, 30], [40, 50, 60]]);
        let mut traj = Trajectory::default();
        traj.push(0, PoseSE3::identity());
        let scene =
            SyntheticScene::new(patches, traj, LidarPattern::default(), default_camera()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let origin = Vector3::new(0.5, -0.3, 0.2);
        for _ in 0..2000 {
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if d.norm() < 1e-3 {
                continue;
            }
            let d = d.normalize();
            let (t, _) = scene.raycast(&origin, &d).expect("closed room");
            let hit = origin + d * t;
            let slack: Vec<f64> = faces
                .iter()
                .map(|f| {
                    let n = Vector3::from(f.normal);
                    (n.dot(&hit) - f.offset) / n.norm()
                })
                .collect();
            assert!(slack.iter().all(|s| *s < 1e-9));
            assert!(slack.iter().any(|s| s.abs() < 1e-9));
        }
    }

    #[test]
    fn outlier_count_and_spread() {
        let scene = SyntheticScene::faceted_room(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = scene.trajectory.poses[0].pose;
        let scan = scene.scan(&pose, 0, &mut rng);
        let b = scene.bounds();
        assert_eq!(
            inject_outliers(&scan, 0.0, 5, &b, &pose.inverse()).unwrap(),
            scan
        );
        let cut: Vec<Point> = scan[..1000].to_vec();
        let bad = inject_outliers(&cut, 0.3, 5, &b, &pose.inverse()).unwrap();
        let replaced: Vec<&Point> = bad
            .iter()
            .zip(&cut)
            .filter(|(a, b)| a.position != b.position)
            .map(|(a, _)| a)
            .collect();
        assert_eq!(replaced.len(), 300);
        let mut d: Vec<f64> = replaced
            .iter()
            .map(|p| scene.distance_to_surfaces(&pose.transform_point(&p.position)))
            .collect();
        d.sort_by(f64::total_cmp);
        assert!(d[d.len() / 2] > 10.0 * scene.lidar.range_noise);
        assert!(inject_outliers(&cut, 1.0, 5, &b, &pose.inverse()).is_err());
    }

    #[test]
    fn waypoint_interpolation() {
        let w = vec![
            Waypoint {
                time_s: 0.0,
                position: [0.0, 0.0, 0.0],
                rpy_deg: [0.0, 0.0, 0.0],
            },
            Waypoint {
                time_s: 1.0,
                position: [1.0, 0.0, 0.0],
                rpy_deg: [0.0, 0.0, 90.0],
            },
        ];
        let t = interpolate(&w, 10.0).unwrap();
        assert_eq!(t.len(), 11);
        assert!((t.poses[5].pose.translation.x - 0.5).abs() < 1e-12);
        assert!((t.poses[5].pose.rotation_angle().to_degrees() - 45.0).abs() < 1e-9);
        assert!(interpolate(&[w[1].clone(), w[0].clone()], 10.0).is_err());
    }
}
