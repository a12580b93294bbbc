//! In-memory odometry runs over synthetic sequences, optionally corrupted
//! with feature-level outliers.
//!
//! Corruption replaces a fraction of each scan's edge and planar features
//! with points uniform in the scene bounds (see [`inject_outliers`]). The
//! replaced points model small floating particles: each one gets a random
//! color, and that color is painted into the camera image at the pixel the
//! point projects to, so camera and LiDAR agree about what the particle looks
//! like.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Image, Point};
use crate::color::Rgb;
use crate::error::Result;
use crate::features::{extract_features, FeatureCloud};
use crate::pipeline::{Odometry, PipelineConfig};

use super::metrics::ate_rmse;
use super::synth::{inject_outliers, SyntheticScene};

/// Feature-level outlier injection settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    /// Fraction of edges and of planars replaced in every scan, in `[0, 1)`.
    pub fraction: f64,
    pub seed: u64,
}

/// Pipeline settings used on the built-in synthetic scenes: the defaults
/// with a 3 cm plane fit tolerance.
pub fn benchmark_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.map.plane_fit_tol = 0.03;
    cfg
}

/// Result of [`run_sequence`].
pub struct SequenceRun {
    pub odometry: Odometry,
    pub ate: f64,
}

/// Scans (and, with coloring on, renders) every pose of `scene`, feeds the
/// odometry and scores the estimate against ground truth. `noise_seed`
/// drives the range noise.
pub fn run_sequence(
    scene: &SyntheticScene,
    cfg: &PipelineConfig,
    noise_seed: u64,
    corruption: Option<Corruption>,
) -> Result<SequenceRun> {
    let camera = cfg.coloring.then_some(scene.camera);
    let mut odo = Odometry::new(cfg.clone(), camera)?;
    let bounds = scene.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for (k, sp) in scene.trajectory.poses.iter().enumerate() {
        let scan = scene.scan(&sp.pose, sp.timestamp_ns, &mut rng);
        let mut image = cfg
            .coloring
            .then(|| scene.render(&sp.pose, sp.timestamp_ns));
        match corruption {
            Some(c) if c.fraction > 0.0 => {
                let clean = extract_features(&scan, &cfg.features);
                let to_sensor = sp.pose.inverse();
                let base = c.seed.wrapping_mul(1_000_003).wrapping_add(3 * k as u64);
                let edges = inject_outliers(&clean.edges, c.fraction, base, &bounds, &to_sensor)?;
                let planars =
                    inject_outliers(&clean.planars, c.fraction, base + 1, &bounds, &to_sensor)?;
                if let Some(img) = image.as_mut() {
                    let mut paint = ChaCha8Rng::seed_from_u64(base + 2);
                    let replaced =
                        changed(&clean.edges, &edges).chain(changed(&clean.planars, &planars));
                    for p in replaced {
                        let color = Rgb::new(paint.random(), paint.random(), paint.random());
                        paint_point(scene, img, &p.position, color);
                    }
                }
                let mut hook = |_: usize, _: i64, f: &mut FeatureCloud| {
                    debug_assert_eq!(f.edges.len(), edges.len());
                    debug_assert_eq!(f.planars.len(), planars.len());
                    f.edges.clone_from(&edges);
                    f.planars.clone_from(&planars);
                };
                odo.process(&scan, sp.timestamp_ns, image.as_ref(), Some(&mut hook));
            }
            _ => {
                odo.process(&scan, sp.timestamp_ns, image.as_ref(), None);
            }
        }
    }
    let ate = ate_rmse(&scene.trajectory, odo.trajectory())?;
    Ok(SequenceRun { odometry: odo, ate })
}

fn changed<'a>(before: &'a [Point], after: &'a [Point]) -> impl Iterator<Item = &'a Point> {
    before
        .iter()
        .zip(after)
        .filter(|(a, b)| a.position != b.position)
        .map(|(_, b)| b)
}

fn paint_point(scene: &SyntheticScene, img: &mut Image, p: &Vector3<f64>, color: Rgb) {
    let cam = &scene.camera;
    if let Some(uv) = cam.project(&cam.lidar_to_camera(p)) {
        let (col, row) = cam.nearest_pixel(uv);
        if col < img.width && row < img.height {
            img.pixels[(row * img.width + col) as usize] = color;
        }
    }
}
