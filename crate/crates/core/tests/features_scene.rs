use carloam::eval::synth::default_camera;
use carloam::eval::{LidarPattern, Patch, SyntheticScene};
use carloam::features::{extract_features, FeatureConfig};
use carloam::se3::PoseSE3;
use carloam::trajectory::Trajectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn patch(origin: [f64; 3], u: [f64; 3], v: [f64; 3], eu: f64, ev: f64) -> Patch {
    Patch {
        origin,
        u_axis: u,
        v_axis: v,
        extent_u: eu,
        extent_v: ev,
        albedo_rgb: [150, 150, 150],
    }
}

/// A square pillar in front of a wall. Its near vertical corner sits at
/// `(4.5, 1.5)`; its far corner occludes the wall.
fn pillar_scene(range_noise: f64) -> SyntheticScene {
    let (y, z) = ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    let patches = vec![
        patch([10.0, -8.0, -3.0], y, z, 16.0, 6.0),
        patch([4.5, 1.5, -3.0], y, z, 1.0, 6.0),
        patch([4.5, 1.5, -3.0], [1.0, 0.0, 0.0], z, 1.0, 6.0),
    ];
    let mut traj = Trajectory::default();
    traj.push(0, PoseSE3::identity());
    let lidar = LidarPattern {
        range_noise,
        ..Default::default()
    };
    SyntheticScene::new(patches, traj, lidar, default_camera()).unwrap()
}

#[test]
fn pillar_edges_lie_on_the_corner() {
    let scene = pillar_scene(0.0);
    let scan = scene.scan(&PoseSE3::identity(), 0, &mut ChaCha8Rng::seed_from_u64(1));
    let f = extract_features(&scan, &FeatureConfig::default());
    assert!(f.edges.len() >= 5, "{} edges", f.edges.len());
    for e in &f.edges {
        let p = e.position;
        let d = ((p.x - 4.5).powi(2) + (p.y - 1.5).powi(2)).sqrt();
        assert!(d < 0.03, "edge {p:?} is {d} m off the corner");
    }
    assert!(f.planars.len() > 10 * f.edges.len());
}

#[test]
fn planars_lie_on_surfaces_with_noise() {
    let scene = pillar_scene(0.005);
    let scan = scene.scan(&PoseSE3::identity(), 0, &mut ChaCha8Rng::seed_from_u64(2));
    let f = extract_features(&scan, &FeatureConfig::default());
    assert!(!f.planars.is_empty());
    for p in &f.planars {
        assert!(scene.distance_to_surfaces(&p.position) < 0.03);
    }
}
