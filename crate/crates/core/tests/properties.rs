use carloam::color::{ciede2000, srgb_to_lab, Lab, Rgb};
use carloam::eval::ate_rmse;
use carloam::map::kdtree::KdTree;
use carloam::map::{validate_plane, MapConfig, MapPoint};
use carloam::robust::{gaussian_weight, welsch, GaussianParam, WelschParam};
use carloam::se3::{point_jacobian, PoseSE3, Twist};
use carloam::trajectory::{StampedPose, Trajectory};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(s: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = PoseSE3> {
    (vec3(10.0), vec3(1.7)).prop_map(|(v, w)| PoseSE3::exp(&Twist::new(v, w)))
}

fn lab() -> impl Strategy<Value = Lab> {
    (0.0..100.0, -110.0..110.0, -110.0..110.0).prop_map(|(l, a, b)| Lab::new(l, a, b))
}

fn close(a: &PoseSE3, b: &PoseSE3, tol: f64) -> bool {
    (a.rotation - b.rotation).abs().max() < tol && (a.translation - b.translation).abs().max() < tol
}

proptest! {
    #[test]
    fn exp_log_round_trip(v in vec3(5.0), w in vec3(1.7)) {
        let t = PoseSE3::exp(&Twist::new(v, w));
        prop_assert!((t.log().to_vector() - Twist::new(v, w).to_vector()).abs().max() < 1e-9);
        prop_assert!(t.orthonormality_error() < 1e-9);
    }

    #[test]
    fn inverse_undoes_transform(t in pose(), p in vec3(20.0)) {
        prop_assert!((t.inverse().transform_point(&t.transform_point(&p)) - p).norm() < 1e-9);
        prop_assert!(close(&(t * t.inverse()), &PoseSE3::identity(), 1e-12));
    }

    #[test]
    fn point_jacobian_moves_points_to_first_order(t in pose(), p in vec3(5.0), d in vec3(1.0), w in vec3(1.0)) {
        let tp = t.transform_point(&p);
        let eps = 1e-7;
        let xi = Twist::new(d * eps, w * eps);
        let moved = PoseSE3::exp(&xi).transform_point(&tp);
        let linear = tp + point_jacobian(&tp).0 * xi.to_vector();
        prop_assert!((moved - linear).norm() < 1e-11);
    }

    #[test]
    fn kernels_are_bounded(x in -1e3..1e3f64, p in 1e-3..1e2f64) {
        let r = welsch(x, WelschParam::new(p).unwrap());
        let g = gaussian_weight(x, GaussianParam::new(p).unwrap());
        prop_assert!((0.0..=1.0).contains(&r) && r.is_finite());
        prop_assert!(g > 0.0 || x.abs() / p > 38.0);
        prop_assert!(g <= 1.0);
    }

    #[test]
    fn ciede2000_is_a_symmetric_premetric(x in lab(), y in lab()) {
        let d = ciede2000(&x, &y).value();
        prop_assert!(d >= 0.0 && d.is_finite());
        prop_assert!((d - ciede2000(&y, &x).value()).abs() < 1e-9);
        prop_assert_eq!(ciede2000(&x, &x).value(), 0.0);
    }

    #[test]
    fn srgb_lab_in_gamut(r: u8, g: u8, b: u8) {
        let l = srgb_to_lab(Rgb::new(r, g, b));
        prop_assert!((-1e-9..=100.0 + 1e-6).contains(&l.l));
        prop_assert!(l.a.abs() < 130.0 && l.b.abs() < 130.0);
    }

    #[test]
    fn kdtree_matches_brute_force(
        pts in prop::collection::vec(vec3(5.0), 1..300),
        q in vec3(6.0),
        k in 1usize..20,
    ) {
        let tree = KdTree::build(pts.clone());
        let mut brute: Vec<(f64, usize)> =
            pts.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        brute.truncate(k);
        let got: Vec<(f64, usize)> = tree.knn(&q, k).iter().map(|n| (n.dist2, n.index)).collect();
        prop_assert_eq!(got, brute);
    }

    #[test]
    fn plane_distance_is_rigid_invariant(t in pose(), q in vec3(0.3)) {
        let pts: Vec<MapPoint> = [(0.0, 0.0), (0.3, 0.1), (-0.2, 0.25), (0.1, -0.3), (-0.25, -0.15)]
            .iter()
            .map(|&(x, y)| MapPoint::new(Vector3::new(x, y, 0.0), None))
            .collect();
        let cfg = MapConfig::default();
        let base = validate_plane(&q, &pts, &cfg).unwrap();
        let moved: Vec<MapPoint> = pts.iter().map(|m| MapPoint::new(t.transform_point(&m.position), None)).collect();
        let tq = t.transform_point(&q);
        let other = validate_plane(&tq, &moved, &cfg).unwrap();
        let d0 = (q - base.anchor.position).dot(&base.normal).abs();
        let d1 = (tq - other.anchor.position).dot(&other.normal).abs();
        prop_assert!((d0 - d1).abs() < 1e-9);
        prop_assert!((d0 - q.z.abs()).abs() < 1e-9);
    }

    #[test]
    fn ate_is_rigid_invariant(g in pose(), steps in prop::collection::vec((vec3(0.5), vec3(0.1)), 3..20)) {
        let mut p = PoseSE3::identity();
        let gt = Trajectory::new(steps.iter().enumerate().map(|(k, (v, w))| {
            p = p * PoseSE3::exp(&Twist::new(*v, *w));
            StampedPose { timestamp_ns: k as i64 * 100_000_000, pose: p }
        }).collect());
        let est = Trajectory::new(gt.poses.iter().enumerate().map(|(k, s)| StampedPose {
            timestamp_ns: s.timestamp_ns,
            pose: PoseSE3::from_translation(Vector3::new(0.01 * (k % 3) as f64, 0.0, -0.02 * (k % 2) as f64)) * s.pose,
        }).collect());
        let a = ate_rmse(&gt, &est).unwrap();
        let b = ate_rmse(&gt, &est.transformed(&g)).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
