//! Edge / planar feature extraction from ordered LiDAR scans.
//!
//! A scan is a list of returns in acquisition order. Scan lines are recovered
//! from that order alone: a new line starts whenever the angular step between
//! consecutive returns exceeds a multiple of the median step. Lines are then cut
//! into segments at range discontinuities, and each segment is classified by
//! local smoothness.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Point;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Neighbors on each side used for smoothness and suppression.
    pub window: usize,
    pub sectors: usize,
    pub max_edges_per_sector: usize,
    pub max_planars_per_sector: usize,
    pub edge_threshold: f64,
    pub planar_threshold: f64,
    /// Minimum usable range (meters).
    pub blind_radius: f64,
    pub min_intensity: f64,
    /// Horizontal / vertical LiDAR field of view (degrees).
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
    pub fov_margin_deg: f64,
    pub max_incidence_deg: f64,
    /// A range jump larger than `max(gap_abs, gap_rel * range)` is a discontinuity.
    pub gap_abs: f64,
    pub gap_rel: f64,
    /// Returns removed on the far side of a discontinuity.
    pub occlusion_fringe: usize,
    /// Line break when the angular step exceeds this multiple of the median step.
    pub line_break_factor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 5,
            sectors: 6,
            max_edges_per_sector: 2,
            max_planars_per_sector: 4,
            edge_threshold: 0.05,
            planar_threshold: 0.005,
            blind_radius: 0.1,
            min_intensity: 1e-2,
            fov_h_deg: 70.4,
            fov_v_deg: 77.2,
            fov_margin_deg: 2.0,
            max_incidence_deg: 85.0,
            gap_abs: 0.3,
            gap_rel: 0.05,
            occlusion_fringe: 2,
            line_break_factor: 3.0,
        }
    }
}

impl FeatureConfig {
    fn is_discontinuity(&self, a: &Point, b: &Point) -> bool {
        let (ra, rb) = (a.range(), b.range());
        (ra - rb).abs() > self.gap_abs.max(self.gap_rel * ra.min(rb))
    }
}

/// Consecutive returns of one scan line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanLine {
    pub points: Vec<Point>,
}

/// Edge and planar features of one scan, in the LiDAR frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureCloud {
    pub edges: Vec<Point>,
    pub planars: Vec<Point>,
    pub timestamp_ns: i64,
}

impl FeatureCloud {
    /// Too few features for a trustworthy alignment.
    pub fn is_degenerate(&self) -> bool {
        self.edges.len() < 10 && self.planars.len() < 50
    }

    pub fn len(&self) -> usize {
        self.edges.len() + self.planars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Splits a scan into lines by angular step. Returns index ranges into `scan`.
pub fn split_lines(scan: &[Point], cfg: &FeatureConfig) -> Vec<std::ops::Range<usize>> {
    if scan.is_empty() {
        return Vec::new();
    }
    let steps: Vec<f64> = scan
        .windows(2)
        .map(|w| angle_between(&w[0].position, &w[1].position))
        .collect();
    let mut sorted: Vec<f64> = steps.iter().copied().filter(|s| s.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    let limit = cfg.line_break_factor * median;

    let mut lines = Vec::new();
    let mut start = 0;
    for (i, &s) in steps.iter().enumerate() {
        if median > 0.0 && s > limit {
            lines.push(start..i + 1);
            start = i + 1;
        }
    }
    lines.push(start..scan.len());
    lines
}

/// Per-return reliability flags for one line.
fn reliability_mask(line: &[Point], cfg: &FeatureConfig) -> Vec<bool> {
    let n = line.len();
    let half_h = (0.5 * cfg.fov_h_deg - cfg.fov_margin_deg).to_radians();
    let half_v = (0.5 * cfg.fov_v_deg - cfg.fov_margin_deg).to_radians();
    let min_grazing = (90.0 - cfg.max_incidence_deg).to_radians();
    let mut keep = vec![true; n];

    for (i, p) in line.iter().enumerate() {
        let q = &p.position;
        let range = q.norm();
        if !(range >= cfg.blind_radius) || !(p.intensity >= cfg.min_intensity) {
            keep[i] = false;
            continue;
        }
        let h = q.y.atan2(q.x.hypot(q.z));
        let v = q.z.atan2(q.x);
        if h.abs() > half_h || v.abs() > half_v {
            keep[i] = false;
            continue;
        }
        if i > 0
            && i + 1 < n
            && !cfg.is_discontinuity(&line[i - 1], p)
            && !cfg.is_discontinuity(p, &line[i + 1])
        {
            let tangent = line[i + 1].position - line[i - 1].position;
            let t = tangent.norm();
            if t > 0.0 {
                // acute angle between beam and local surface tangent
                let cos = (q.dot(&tangent) / (range * t)).abs().min(1.0);
                if cos.acos() < min_grazing {
                    keep[i] = false;
                }
            }
        }
    }

    for i in 0..n.saturating_sub(1) {
        let (a, b) = (&line[i], &line[i + 1]);
        if !cfg.is_discontinuity(a, b) {
            continue;
        }
        if b.range() > a.range() {
            for k in (i + 1..n).take(cfg.occlusion_fringe) {
                keep[k] = false;
            }
        } else {
            for k in (0..=i).rev().take(cfg.occlusion_fringe) {
                keep[k] = false;
            }
        }
    }
    keep
}

/// Drops returns that are too close, too dim, at the FoV border, at grazing
/// incidence, or in the occluded fringe of a range jump.
pub fn select_reliable(scan: &[Point], cfg: &FeatureConfig) -> Vec<Point> {
    split_lines(scan, cfg)
        .into_iter()
        .flat_map(|r| {
            let line = &scan[r];
            let mask = reliability_mask(line, cfg);
            line.iter()
                .zip(mask)
                .filter_map(|(p, k)| k.then_some(*p))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Local smoothness of point `i`:
/// `|sum_j (p_i - p_j)| / (|S| |p_i|)` over the `2 * window` neighbors.
/// `None` when the window does not fit inside the line.
pub fn smoothness(line: &ScanLine, i: usize, window: usize) -> Option<f64> {
    let pts = &line.points;
    if window == 0 || i < window || i + window >= pts.len() {
        return None;
    }
    let pi = pts[i].position;
    let mut sum = Vector3::zeros();
    for j in i - window..=i + window {
        if j != i {
            sum += pi - pts[j].position;
        }
    }
    let norm = pi.norm();
    (norm > 0.0).then(|| sum.norm() / (2 * window) as f64 / norm)
}

#[derive(Clone, Copy, PartialEq)]
enum Label {
    None,
    Edge,
    Planar,
}

/// Labels one discontinuity-free segment.
fn classify_segment(seg: &ScanLine, reliable: &[bool], cfg: &FeatureConfig) -> Vec<Label> {
    let n = seg.points.len();
    let w = cfg.window;
    let mut labels = vec![Label::None; n];
    if n < 2 * w + 1 || cfg.sectors == 0 {
        return labels;
    }
    let curv: Vec<f64> = (0..n)
        .map(|i| smoothness(seg, i, w).unwrap_or(f64::NAN))
        .collect();
    let mut picked = vec![false; n];
    let (start, end) = (w, n - w);
    let suppress = |picked: &mut [bool], i: usize| {
        for k in i.saturating_sub(w)..=(i + w).min(n - 1) {
            picked[k] = true;
        }
    };

    for s in 0..cfg.sectors {
        let sp = start + (end - start) * s / cfg.sectors;
        let ep = start + (end - start) * (s + 1) / cfg.sectors;
        if sp >= ep {
            continue;
        }
        let mut order: Vec<usize> = (sp..ep).filter(|&i| curv[i].is_finite()).collect();

        // sharpest first, ties to the lower index
        order.sort_by(|&a, &b| curv[b].total_cmp(&curv[a]).then(a.cmp(&b)));
        let mut count = 0;
        for &i in &order {
            if curv[i] <= cfg.edge_threshold || count >= cfg.max_edges_per_sector {
                break;
            }
            if picked[i] || !reliable[i] {
                continue;
            }
            labels[i] = Label::Edge;
            count += 1;
            suppress(&mut picked, i);
        }

        order.sort_by(|&a, &b| curv[a].total_cmp(&curv[b]).then(a.cmp(&b)));
        let mut count = 0;
        for &i in &order {
            if curv[i] >= cfg.planar_threshold || count >= cfg.max_planars_per_sector {
                break;
            }
            if picked[i] || !reliable[i] {
                continue;
            }
            labels[i] = Label::Planar;
            count += 1;
            suppress(&mut picked, i);
        }
    }
    labels
}

/// Cuts a line at range discontinuities.
pub fn segment_line(line: &[Point], cfg: &FeatureConfig) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..line.len().saturating_sub(1) {
        if cfg.is_discontinuity(&line[i], &line[i + 1]) {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < line.len() {
        out.push(start..line.len());
    }
    out
}

fn extract_line(line: &[Point], cfg: &FeatureConfig) -> (Vec<Point>, Vec<Point>) {
    let reliable = reliability_mask(line, cfg);
    let (mut edges, mut planars) = (Vec::new(), Vec::new());
    for r in segment_line(line, cfg) {
        let seg = ScanLine {
            points: line[r.clone()].to_vec(),
        };
        let labels = classify_segment(&seg, &reliable[r], cfg);
        for (p, l) in seg.points.iter().zip(labels) {
            match l {
                Label::Edge => edges.push(*p),
                Label::Planar => planars.push(*p),
                Label::None => {}
            }
        }
    }
    (edges, planars)
}

/// Extracts edge and planar features. Lines are processed independently and
/// merged in line order.
pub fn extract_features(scan: &[Point], cfg: &FeatureConfig) -> FeatureCloud {
    let lines = split_lines(scan, cfg);
    let per_line = par::map(&lines, |r| extract_line(&scan[r.clone()], cfg));
    let mut out = FeatureCloud {
        timestamp_ns: scan.first().map_or(0, |p| p.timestamp_ns),
        ..Default::default()
    };
    for (e, p) in per_line {
        out.edges.extend(e);
        out.planars.extend(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64, z: f64) -> Point {
        Point::new(Vector3::new(x, y, z), 1.0)
    }

    /// One horizontal fan of rays against a flat wall at `x = dist`.
    fn wall_line(dist: f64, n: usize, half_angle_deg: f64) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let a = (-half_angle_deg + 2.0 * half_angle_deg * i as f64 / (n - 1) as f64)
                    .to_radians();
                pt(dist, dist * a.tan(), 0.0)
            })
            .collect()
    }

    /// A fan hitting two walls meeting at a 90 degree corner in front of the sensor.
    fn corner_line(n: usize) -> (Vec<Point>, usize) {
        // walls: y = x - 4 for y <= 0 side, y = 4 - x for y >= 0 side (corner at (4, 0))
        let mut pts = Vec::new();
        let mut corner = 0;
        let mut best = f64::MAX;
        for i in 0..n {
            let a: f64 = (-30.0 + 60.0 * i as f64 / (n - 1) as f64).to_radians();
            let (c, s) = (a.cos(), a.sin());
            // ray t*(c, s) meets y = -(x - 4) when s t = 4 - c t, y = x - 4 when s t = c t - 4
            let t = if s >= 0.0 {
                4.0 / (c + s)
            } else {
                4.0 / (c - s)
            };
            let p = pt(t * c, t * s, 0.0);
            if p.position.y.abs() < best {
                best = p.position.y.abs();
                corner = i;
            }
            pts.push(p);
        }
        (pts, corner)
    }

    #[test]
    fn reliability_rules() {
        let cfg = FeatureConfig::default();
        let mut line = wall_line(3.0, 31, 15.0);
        assert_eq!(select_reliable(&line, &cfg).len(), 31);

        line[10].position = Vector3::new(0.05, 0.0, 0.0);
        line[11].intensity = 0.0;
        let kept = select_reliable(&line, &cfg);
        assert!(!kept.iter().any(|p| p.range() < 0.1));
        assert!(!kept.iter().any(|p| p.intensity == 0.0));

        // outside the horizontal FoV margin
        assert!(select_reliable(&[pt(1.0, (34.5f64).to_radians().tan(), 0.0)], &cfg).is_empty());
        assert_eq!(
            select_reliable(&[pt(1.0, (33.0f64).to_radians().tan(), 0.0)], &cfg).len(),
            1
        );
    }

    #[test]
    fn occlusion_fringe_removed() {
        let cfg = FeatureConfig::default();
        let mut line = wall_line(3.0, 21, 10.0);
        // points 11.. jump back by 1 m
        for p in line.iter_mut().skip(11) {
            p.position *= 4.0 / 3.0;
        }
        let mask = reliability_mask(&line, &cfg);
        assert!(!mask[11] && !mask[12], "far side fringe must go");
        assert!(mask[10] && mask[9] && mask[13]);
    }

    #[test]
    fn grazing_incidence_removed() {
        let cfg = FeatureConfig::default();
        // wall almost parallel to the beams: points along x at y = 0.1
        let line: Vec<Point> = (0..11)
            .map(|i| pt(2.0 + 0.02 * i as f64, 0.02, 0.0))
            .collect();
        let mask = reliability_mask(&line, &cfg);
        assert!(mask[1..10].iter().all(|k| !k));
    }

    #[test]
    fn smoothness_examples() {
        let line = ScanLine {
            points: (0..21)
                .map(|i| pt(5.0, -1.0 + 0.1 * i as f64, 0.0))
                .collect(),
        };
        for i in 5..16 {
            assert!(smoothness(&line, i, 5).unwrap() < 1e-12);
        }
        assert_eq!(smoothness(&line, 4, 5), None);
        assert_eq!(smoothness(&line, 16, 5), None);

        let (pts, corner) = corner_line(41);
        let line = ScanLine { points: pts };
        let c_corner = smoothness(&line, corner, 5).unwrap();
        let flat_max = (5..36)
            .filter(|&i| (i as isize - corner as isize).abs() > 5)
            .map(|i| smoothness(&line, i, 5).unwrap())
            .fold(0.0, f64::max);
        assert!(c_corner > flat_max, "{c_corner} vs {flat_max}");

        // far outlier among near points
        let mut pts = line.points.clone();
        pts[10].position *= 3.0;
        let spike = smoothness(&ScanLine { points: pts }, 10, 5).unwrap();
        assert!(spike > c_corner);
    }

    #[test]
    fn plane_gives_only_planars() {
        let cfg = FeatureConfig::default();
        let scan: Vec<Point> = (0..8)
            .flat_map(|row| {
                let z = -0.4 + 0.1 * row as f64;
                wall_line(3.0, 60, 25.0).into_iter().map(move |mut p| {
                    p.position.z = z;
                    p
                })
            })
            .collect();
        let f = extract_features(&scan, &cfg);
        assert!(f.edges.is_empty());
        assert!(!f.planars.is_empty());
    }

    #[test]
    fn corner_is_an_edge() {
        let cfg = FeatureConfig::default();
        let (pts, corner) = corner_line(41);
        let f = extract_features(&pts, &cfg);
        assert!(f
            .edges
            .iter()
            .any(|e| (e.position - pts[corner].position).norm() < 1e-12));
    }

    #[test]
    fn empty_scan() {
        let f = extract_features(&[], &FeatureConfig::default());
        assert!(f.is_empty() && f.is_degenerate());
    }

    #[test]
    fn line_recovery_splits_on_angular_jumps() {
        let cfg = FeatureConfig::default();
        let mut scan = wall_line(3.0, 30, 20.0);
        let second: Vec<Point> = wall_line(3.0, 30, 20.0)
            .into_iter()
            .map(|mut p| {
                p.position.z = 0.3;
                p
            })
            .collect();
        scan.extend(second);
        let lines = split_lines(&scan, &cfg);
        assert_eq!(lines, vec![0..30, 30..60]);
    }
}
