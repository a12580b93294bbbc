//! Scan-to-map pose optimization.
//!
//! Every feature point is matched to a map line (edges) or plane (planars).
//! Distances pass through the Welsch kernel and are scaled by a Gaussian
//! weight of the CIEDE2000 difference between the point's color and the
//! color of its nearest map neighbor. The weighted sum `sum W * psi(d)` is
//! minimized by damped Gauss-Newton with left-perturbation updates.

use nalgebra::{Matrix6, RowVector6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::Point;
use crate::color::{color_difference_rgb, Rgb};
use crate::error::{Error, Result};
use crate::features::FeatureCloud;
use crate::map::{EdgeCorrespondence, GlobalMap, PlaneCorrespondence};
use crate::par;
use crate::robust::{
    gaussian_weight, welsch, welsch_derivative, welsch_weight, GaussianParam, WelschParam,
};
use crate::se3::{point_jacobian, PoseSE3, Twist};

/// How the Gauss-Newton system is formed from the residual terms. With the
/// Welsch kernel disabled both rules give the classic least-squares step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Gradient `sum J_i^T` from the kernel rows, curvature
    /// `sum W psi'(d)/d g_i^T g_i` from the raw distance rows `g_i`.
    #[default]
    Reweighted,
    /// `W psi(d)` stacked as an ordinary residual vector with the kernel rows
    /// as its Jacobian: `(J^T J + damping I) x = -J^T f`.
    KernelResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub nu: WelschParam,
    pub sigma: GaussianParam,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub damping: f64,
    /// Gate on both the nearest-neighbor distance and the residual distance.
    pub max_correspondence_dist: f64,
    pub welsch_enabled: bool,
    pub color_weight_enabled: bool,
    /// Condition number of the unweighted normal matrix, rotation scaled by
    /// the mean lever arm, above which the problem is declared degenerate.
    pub max_condition: f64,
    pub min_terms: usize,
    pub max_retries: usize,
    pub step_rule: StepRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            nu: WelschParam::default(),
            sigma: GaussianParam::default(),
            max_iterations: 20,
            step_tolerance: 1e-6,
            damping: 1e-4,
            max_correspondence_dist: 1.0,
            welsch_enabled: true,
            color_weight_enabled: true,
            max_condition: 1e3,
            min_terms: 10,
            max_retries: 5,
            step_rule: StepRule::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_tolerance", self.step_tolerance),
            ("max_correspondence_dist", self.max_correspondence_dist),
            ("max_condition", self.max_condition),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "optimizer.{name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "optimizer.damping must be >= 0, got {}",
                self.damping
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "optimizer.max_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Edge,
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTerm {
    pub kind: TermKind,
    /// Point-to-line distance, or signed point-to-plane distance.
    pub distance: f64,
    pub residual: f64,
    pub weight: f64,
    pub jacobian: RowVector6<f64>,
}

impl ResidualTerm {
    pub fn value(&self) -> f64 {
        self.weight * self.residual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Correspondence {
    Edge(EdgeCorrespondence),
    Plane(PlaneCorrespondence),
}

pub fn point_to_edge_distance(q: &Vector3<f64>, corr: &EdgeCorrespondence) -> f64 {
    (q - corr.anchor.position).cross(&corr.direction).norm()
}

pub fn point_to_plane_distance(q: &Vector3<f64>, corr: &PlaneCorrespondence) -> f64 {
    (q - corr.anchor.position).dot(&corr.normal)
}

pub fn color_weight(query: Option<Rgb>, anchor: Option<Rgb>, cfg: &OptimizerConfig) -> f64 {
    match (query, anchor) {
        (Some(a), Some(b)) if cfg.color_weight_enabled => {
            gaussian_weight(color_difference_rgb(a, b).value(), cfg.sigma)
        }
        _ => 1.0,
    }
}

/// A matched feature with its correspondence geometry frozen.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    kind: TermKind,
    point: Vector3<f64>,
    anchor: Vector3<f64>,
    axis: Vector3<f64>,
    weight: f64,
    colored: bool,
}

impl Constraint {
    fn new(p: &Point, corr: &Correspondence, cfg: &OptimizerConfig) -> Self {
        let (kind, anchor, axis) = match corr {
            Correspondence::Edge(c) => (TermKind::Edge, c.anchor, c.direction),
            Correspondence::Plane(c) => (TermKind::Plane, c.anchor, c.normal),
        };
        Self {
            kind,
            point: p.position,
            anchor: anchor.position,
            axis,
            weight: color_weight(p.color, anchor.color, cfg),
            colored: cfg.color_weight_enabled && p.color.is_some() && anchor.color.is_some(),
        }
    }

    fn residual_of(&self, d: f64, cfg: &OptimizerConfig) -> f64 {
        if cfg.welsch_enabled {
            welsch(d, cfg.nu)
        } else {
            d
        }
    }

    /// Weighted residual at pose `t`, without gating.
    fn cost(&self, t: &PoseSE3, cfg: &OptimizerConfig) -> f64 {
        let q = t.transform_point(&self.point);
        let d = match self.kind {
            TermKind::Edge => (q - self.anchor).cross(&self.axis).norm(),
            TermKind::Plane => (q - self.anchor).dot(&self.axis).abs(),
        };
        self.weight * self.residual_of(d, cfg)
    }

    fn term(&self, t: &PoseSE3, cfg: &OptimizerConfig) -> Option<ResidualTerm> {
        let q = t.transform_point(&self.point);
        let (distance, grad) = match self.kind {
            TermKind::Edge => {
                let u = (q - self.anchor).cross(&self.axis);
                let d = u.norm();
                if d == 0.0 {
                    return None;
                }
                // d|u|/dq for u = (q - a) x n
                (d, self.axis.cross(&(u / d)))
            }
            TermKind::Plane => {
                let d = (q - self.anchor).dot(&self.axis);
                (d, if d >= 0.0 { self.axis } else { -self.axis })
            }
        };
        let abs_d = distance.abs();
        if !(abs_d <= cfg.max_correspondence_dist) {
            return None;
        }
        let slope = if cfg.welsch_enabled {
            welsch_derivative(abs_d, cfg.nu)
        } else {
            1.0
        };
        let row = grad.transpose() * point_jacobian(&q).0;
        Some(ResidualTerm {
            kind: self.kind,
            distance,
            residual: self.residual_of(abs_d, cfg),
            weight: self.weight,
            jacobian: row * (self.weight * slope),
        })
    }

    /// Unweighted, unrobustified row used for the conditioning test.
    fn geometric_row(&self, t: &PoseSE3) -> RowVector6<f64> {
        let q = t.transform_point(&self.point);
        let grad = match self.kind {
            TermKind::Edge => {
                let u = (q - self.anchor).cross(&self.axis);
                let n = u.norm();
                if n > 0.0 {
                    self.axis.cross(&(u / n))
                } else {
                    Vector3::zeros()
                }
            }
            TermKind::Plane => self.axis,
        };
        grad.transpose() * point_jacobian(&q).0
    }
}

/// Residual term of one feature point (sensor frame) against a validated
/// correspondence, at pose `t`.
pub fn build_residual(
    feature: &Point,
    t: &PoseSE3,
    corr: &Correspondence,
    cfg: &OptimizerConfig,
) -> Option<ResidualTerm> {
    Constraint::new(feature, corr, cfg).term(t, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InlierStats {
    pub edge_accepted: usize,
    pub plane_accepted: usize,
    /// Too few map neighbors, or nearest neighbor beyond the gate.
    pub no_neighbors: usize,
    /// Neighborhood failed the line / plane test.
    pub bad_shape: usize,
    /// Residual distance beyond the gate, or exactly on an edge line.
    pub distance_rejected: usize,
    /// Accepted terms that carried a color weight.
    pub colored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentStatus {
    Converged,
    MaxIterations,
    /// No damped step decreased the objective.
    Stalled,
    Degenerate,
    InsufficientCorrespondences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub pose: PoseSE3,
    pub iterations: usize,
    pub final_cost: f64,
    pub status: AlignmentStatus,
    pub inlier_stats: InlierStats,
}

impl AlignmentResult {
    pub fn is_degenerate(&self) -> bool {
        self.status == AlignmentStatus::Degenerate
    }

    pub fn is_reliable(&self) -> bool {
        !matches!(
            self.status,
            AlignmentStatus::Degenerate | AlignmentStatus::InsufficientCorrespondences
        )
    }
}

enum Match {
    Ok(Constraint, Option<ResidualTerm>),
    NoNeighbors,
    BadShape,
}

fn match_point(
    p: &Point,
    kind: TermKind,
    map: &GlobalMap,
    t: &PoseSE3,
    cfg: &OptimizerConfig,
) -> Match {
    let q = t.transform_point(&p.position);
    let gate = cfg.max_correspondence_dist;
    let part = match kind {
        TermKind::Edge => crate::map::MapPart::Edge,
        TermKind::Plane => crate::map::MapPart::Planar,
    };
    let store = map.store(part);
    let k = map.config().neighbors;
    if store.len() < k {
        return Match::NoNeighbors;
    }
    let corr = match kind {
        TermKind::Edge => map.edge_correspondence(&q, gate).map(Correspondence::Edge),
        TermKind::Plane => map
            .plane_correspondence(&q, gate)
            .map(Correspondence::Plane),
    };
    match corr {
        Some(c) => {
            let con = Constraint::new(p, &c, cfg);
            Match::Ok(con, con.term(t, cfg))
        }
        None => match store.knn(&q, 1).first() {
            Some((_, d2)) if *d2 <= gate * gate => Match::BadShape,
            _ => Match::NoNeighbors,
        },
    }
}

/// Matches every feature against the map at pose `t`. Terms are returned in
/// feature order (edges first).
fn build_constraints(
    features: &FeatureCloud,
    map: &GlobalMap,
    t: &PoseSE3,
    cfg: &OptimizerConfig,
) -> (Vec<(Constraint, ResidualTerm)>, InlierStats) {
    let tagged: Vec<(&Point, TermKind)> = features
        .edges
        .iter()
        .map(|p| (p, TermKind::Edge))
        .chain(features.planars.iter().map(|p| (p, TermKind::Plane)))
        .collect();
    let matches = par::map(&tagged, |(p, kind)| match_point(p, *kind, map, t, cfg));
    let mut stats = InlierStats::default();
    let mut out = Vec::with_capacity(matches.len());
    for m in matches {
        match m {
            Match::Ok(c, Some(term)) => {
                match term.kind {
                    TermKind::Edge => stats.edge_accepted += 1,
                    TermKind::Plane => stats.plane_accepted += 1,
                }
                if c.colored {
                    stats.colored += 1;
                }
                out.push((c, term));
            }
            Match::Ok(_, None) => stats.distance_rejected += 1,
            Match::NoNeighbors => stats.no_neighbors += 1,
            Match::BadShape => stats.bad_shape += 1,
        }
    }
    (out, stats)
}

/// Terms of `features` against `map` at pose `t`, in feature order.
pub fn build_terms(
    features: &FeatureCloud,
    map: &GlobalMap,
    t: &PoseSE3,
    cfg: &OptimizerConfig,
) -> (Vec<ResidualTerm>, InlierStats) {
    let (c, s) = build_constraints(features, map, t, cfg);
    (c.into_iter().map(|(_, t)| t).collect(), s)
}

/// Normal equations `(J^T J, J^T f)`, accumulated in term order.
pub fn normal_equations(terms: &[ResidualTerm]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for t in terms {
        let jt = t.jacobian.transpose();
        h += jt * t.jacobian;
        g += jt * t.value();
    }
    (h, g)
}

/// Reweighted system for the Welsch objective: `H = sum W psi'(d)/d g^T g`
/// over the raw distance rows and `g = sum J^T` over the kernel rows.
fn reweighted_equations(
    cons: &[(Constraint, ResidualTerm)],
    t: &PoseSE3,
    cfg: &OptimizerConfig,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (c, term) in cons {
        let row = c.geometric_row(t);
        h += row.transpose() * row * (term.weight * welsch_weight(term.distance.abs(), cfg.nu));
        g += term.jacobian.transpose();
    }
    (h, g)
}

/// Solves `(H + damping I) x = -g`.
pub fn solve_step(h: &Matrix6<f64>, g: &Vector6<f64>, damping: f64) -> Option<Vector6<f64>> {
    let a = h + Matrix6::identity() * damping;
    let x = match a.cholesky() {
        Some(c) => c.solve(&-g),
        None => a.lu().solve(&-g)?,
    };
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Condition number with the rotation block rescaled by the lever arm, so
/// that translation and rotation are both measured in meters.
fn balanced_condition(h: &Matrix6<f64>, lever: f64) -> f64 {
    let s = 1.0 / lever.max(1e-9);
    let d = Matrix6::from_diagonal(&nalgebra::Vector6::new(1.0, 1.0, 1.0, s, s, s));
    condition_number(&(d * h * d))
}

fn condition_number(h: &Matrix6<f64>) -> f64 {
    let ev = SymmetricEigen::new(*h).eigenvalues;
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Aligns sensor-frame `features` to `map`, starting from `initial`.
pub fn align(
    features: &FeatureCloud,
    map: &GlobalMap,
    initial: &PoseSE3,
    cfg: &OptimizerConfig,
) -> AlignmentResult {
    let mut pose = *initial;
    let mut iterations = 0;
    let mut status = AlignmentStatus::MaxIterations;

    for _ in 0..cfg.max_iterations {
        let (cons, stats) = build_constraints(features, map, &pose, cfg);
        if cons.len() < cfg.min_terms {
            return AlignmentResult {
                pose: *initial,
                iterations,
                final_cost: 0.0,
                status: AlignmentStatus::InsufficientCorrespondences,
                inlier_stats: stats,
            };
        }
        let mut geo = Matrix6::zeros();
        for (c, _) in &cons {
            let r = c.geometric_row(&pose);
            geo += r.transpose() * r;
        }
        let lever = cons
            .iter()
            .map(|(c, _)| pose.transform_point(&c.point).norm_squared())
            .sum::<f64>()
            / cons.len() as f64;
        let cond = balanced_condition(&geo, lever.sqrt());
        log::debug!(
            "iteration {iterations}: {} terms, condition {cond:.3e}",
            cons.len()
        );
        if cond > cfg.max_condition {
            status = AlignmentStatus::Degenerate;
            break;
        }

        let (h, g) = if cfg.welsch_enabled && cfg.step_rule == StepRule::Reweighted {
            reweighted_equations(&cons, &pose, cfg)
        } else {
            let terms: Vec<ResidualTerm> = cons.iter().map(|(_, t)| *t).collect();
            normal_equations(&terms)
        };
        let cost0: f64 = cons.iter().map(|(c, _)| c.cost(&pose, cfg)).sum();

        let mut damping = cfg.damping;
        let mut accepted = None;
        for _ in 0..=cfg.max_retries {
            let Some(x) = solve_step(&h, &g, damping) else {
                damping = (damping * 10.0).max(1e-12);
                continue;
            };
            let candidate = PoseSE3::exp(&Twist::from_vector(&x)) * pose;
            let cost1: f64 = cons.iter().map(|(c, _)| c.cost(&candidate, cfg)).sum();
            if cost1 <= cost0 + 1e-9 * cost0.abs().max(f64::MIN_POSITIVE) {
                accepted = Some((x, candidate));
                break;
            }
            damping = (damping * 10.0).max(1e-12);
        }
        let Some((x, candidate)) = accepted else {
            status = AlignmentStatus::Stalled;
            break;
        };
        pose = candidate.orthonormalized();
        iterations += 1;
        if x.norm() < cfg.step_tolerance {
            status = AlignmentStatus::Converged;
            break;
        }
    }

    let (cons, stats) = build_constraints(features, map, &pose, cfg);
    AlignmentResult {
        pose,
        iterations,
        final_cost: cons.iter().map(|(_, t)| t.value()).sum(),
        status,
        inlier_stats: stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{MapConfig, MapPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn balanced_condition_separates_plane_from_box() {
        let row = |n: Vector3<f64>, q: Vector3<f64>| {
            let mut r = nalgebra::Vector6::zeros();
            r.fixed_rows_mut::<3>(0).copy_from(&n);
            r.fixed_rows_mut::<3>(3).copy_from(&q.cross(&n));
            r * r.transpose()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut wall = Matrix6::zeros();
        let mut room = Matrix6::zeros();
        for _ in 0..300 {
            let q = rvec(&mut rng, 4.0);
            wall += row(
                Vector3::x() + rvec(&mut rng, 0.01),
                Vector3::new(6.0, q.y, q.z),
            );
            for (k, axis) in [Vector3::x(), Vector3::y(), Vector3::z()]
                .iter()
                .enumerate()
            {
                let mut p = q;
                p[k] = 5.0;
                room += row(*axis, p);
            }
        }
        assert!(balanced_condition(&wall, 7.0) > 1e3);
        assert!(balanced_condition(&room, 7.0) < 1e2);
    }

    fn edge_corr(anchor: Vector3<f64>, dir: Vector3<f64>, color: Option<Rgb>) -> Correspondence {
        Correspondence::Edge(EdgeCorrespondence {
            query: Vector3::zeros(),
            neighbors: vec![],
            direction: dir.normalize(),
            anchor: MapPoint::new(anchor, color),
        })
    }

    fn plane_corr(
        anchor: Vector3<f64>,
        normal: Vector3<f64>,
        color: Option<Rgb>,
    ) -> Correspondence {
        Correspondence::Plane(PlaneCorrespondence {
            query: Vector3::zeros(),
            neighbors: vec![],
            normal: normal.normalize(),
            anchor: MapPoint::new(anchor, color),
        })
    }

    #[test]
    fn distance_examples() {
        let Correspondence::Edge(z) = edge_corr(Vector3::zeros(), Vector3::z(), None) else {
            unreachable!()
        };
        assert_eq!(
            point_to_edge_distance(&Vector3::new(0.0, 0.0, 4.0), &z),
            0.0
        );
        assert_eq!(
            point_to_edge_distance(&Vector3::new(1.0, 0.0, 0.0), &z),
            1.0
        );
        let Correspondence::Plane(p) = plane_corr(Vector3::zeros(), Vector3::z(), None) else {
            unreachable!()
        };
        assert!(
            (point_to_plane_distance(&Vector3::new(3.0, 4.0, 0.7), &p).abs() - 0.7).abs() < 1e-15
        );
        assert_eq!(
            point_to_plane_distance(&Vector3::new(3.0, 4.0, 0.0), &p),
            0.0
        );

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = rvec(&mut rng, 3.0);
            let n = rvec(&mut rng, 1.0).normalize();
            let q = rvec(&mut rng, 3.0);
            let Correspondence::Edge(e) = edge_corr(a, n, None) else {
                unreachable!()
            };
            let v = q - a;
            let proj = (v - n * v.dot(&n)).norm();
            assert!((point_to_edge_distance(&q, &e) - proj).abs() < 1e-12);
        }
    }

    #[test]
    fn color_weight_examples() {
        let cfg = OptimizerConfig::default();
        let red = Rgb::new(200, 10, 10);
        assert_eq!(color_weight(Some(red), Some(red), &cfg), 1.0);
        assert_eq!(color_weight(None, Some(red), &cfg), 1.0);
        assert_eq!(color_weight(Some(red), None, &cfg), 1.0);
        let off = OptimizerConfig {
            color_weight_enabled: false,
            ..cfg.clone()
        };
        assert_eq!(
            color_weight(Some(red), Some(Rgb::new(0, 0, 255)), &off),
            1.0
        );
        let w = color_weight(Some(red), Some(Rgb::new(0, 0, 255)), &cfg);
        assert!(w > 0.0 && w < 1e-3);
    }

    #[test]
    fn zero_plane_distance_gives_zero_row() {
        let cfg = OptimizerConfig::default();
        let corr = plane_corr(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::z(),
            Some(Rgb::new(1, 2, 3)),
        );
        let p = Point::new(Vector3::new(2.0, -1.0, 1.0), 1.0).with_color(Rgb::new(200, 0, 0));
        let t = build_residual(&p, &PoseSE3::identity(), &corr, &cfg).unwrap();
        assert_eq!(t.residual, 0.0);
        assert_eq!(t.jacobian, RowVector6::zeros());
    }

    #[test]
    fn edge_on_line_is_skipped() {
        let cfg = OptimizerConfig::default();
        let corr = edge_corr(Vector3::zeros(), Vector3::z(), None);
        let p = Point::new(Vector3::new(0.0, 0.0, 3.0), 1.0);
        assert!(build_residual(&p, &PoseSE3::identity(), &corr, &cfg).is_none());
        let far = Point::new(Vector3::new(2.0, 0.0, 3.0), 1.0);
        assert!(build_residual(&far, &PoseSE3::identity(), &corr, &cfg).is_none());
    }

    #[test]
    fn plain_rows_reduce_to_classic_least_squares() {
        let cfg = OptimizerConfig {
            welsch_enabled: false,
            color_weight_enabled: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = PoseSE3::exp(&Twist::new(rvec(&mut rng, 1.0), rvec(&mut rng, 0.5)));
            let p = Point::new(rvec(&mut rng, 3.0), 1.0);
            let q = t.transform_point(&p.position);
            let a = q + rvec(&mut rng, 0.3);
            let n = rvec(&mut rng, 1.0).normalize();

            // classic point-to-plane row: n^T [I | -[q]x]  with sign of the residual
            let term = build_residual(&p, &t, &plane_corr(a, n, None), &cfg).unwrap();
            let d = (q - a).dot(&n);
            assert!((term.residual - d.abs()).abs() < 1e-12);
            let nn = n * d.signum();
            let classic = RowVector6::new(
                nn.x,
                nn.y,
                nn.z,
                (q.cross(&nn)).x,
                (q.cross(&nn)).y,
                (q.cross(&nn)).z,
            );
            assert!((term.jacobian - classic).norm() < 1e-12);

            // classic point-to-line: gradient of |(q - a) x n| is the unit
            // perpendicular from the line to q
            let term = build_residual(&p, &t, &edge_corr(a, n, None), &cfg).unwrap();
            let v = q - a;
            let perp = v - n * v.dot(&n);
            assert!((term.residual - perp.norm()).abs() < 1e-12);
            let u = perp / perp.norm();
            let classic =
                RowVector6::new(u.x, u.y, u.z, q.cross(&u).x, q.cross(&u).y, q.cross(&u).z);
            assert!((term.jacobian - classic).norm() < 1e-10);
        }
    }

    #[test]
    fn rows_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for (welsch_enabled, color_weight_enabled) in
            [(true, true), (true, false), (false, true), (false, false)]
        {
            let cfg = OptimizerConfig {
                welsch_enabled,
                color_weight_enabled,
                ..Default::default()
            };
            for i in 0..100 {
                let t = PoseSE3::exp(&Twist::new(rvec(&mut rng, 1.0), rvec(&mut rng, 0.5)));
                let p = Point::new(rvec(&mut rng, 3.0), 1.0).with_color(Rgb::new(
                    rng.random(),
                    rng.random(),
                    rng.random(),
                ));
                let q = t.transform_point(&p.position);
                let a = q + rvec(&mut rng, 0.4);
                let n = rvec(&mut rng, 1.0);
                let color = Some(Rgb::new(rng.random(), rng.random(), rng.random()));
                let corr = if i % 2 == 0 {
                    edge_corr(a, n, color)
                } else {
                    plane_corr(a, n, color)
                };
                let Some(term) = build_residual(&p, &t, &corr, &cfg) else {
                    continue;
                };
                let f = |x: Vector6<f64>| {
                    let tt = PoseSE3::exp(&Twist::from_vector(&x)) * t;
                    Constraint::new(&p, &corr, &cfg).cost(&tt, &cfg)
                };
                for k in 0..6 {
                    let mut e = Vector6::zeros();
                    e[k] = h;
                    let fd = (f(e) - f(-e)) / (2.0 * h);
                    let an = term.jacobian[k];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn uniform_weights_keep_step_direction() {
        let cfg = OptimizerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut terms = Vec::new();
        for _ in 0..40 {
            let p = Point::new(rvec(&mut rng, 3.0), 1.0);
            let corr = plane_corr(p.position + rvec(&mut rng, 0.2), rvec(&mut rng, 1.0), None);
            terms.push(build_residual(&p, &PoseSE3::identity(), &corr, &cfg).unwrap());
        }
        let (h, g) = normal_equations(&terms);
        let a = solve_step(&h, &g, 0.0).unwrap();
        let scaled: Vec<ResidualTerm> = terms
            .iter()
            .map(|t| ResidualTerm {
                weight: t.weight * 0.3,
                jacobian: t.jacobian * 0.3,
                ..*t
            })
            .collect();
        let (h, g) = normal_equations(&scaled);
        let b = solve_step(&h, &g, 0.0).unwrap();
        assert!((a.normalize() - b.normalize()).norm() < 1e-9);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = OptimizerConfig::default();
        assert!(c.validate().is_ok());
        c.step_tolerance = 0.0;
        assert!(c.validate().is_err());
        let c = OptimizerConfig {
            damping: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn too_few_terms_returns_initial() {
        let map = GlobalMap::new(MapConfig::default()).unwrap();
        let f = FeatureCloud {
            edges: vec![Point::new(Vector3::x(), 1.0)],
            planars: vec![],
            timestamp_ns: 0,
        };
        let init = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let r = align(&f, &map, &init, &OptimizerConfig::default());
        assert_eq!(r.status, AlignmentStatus::InsufficientCorrespondences);
        assert_eq!(r.pose, init);
    }
}
