//! Trajectory and map-consistency metrics.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::KdTree;
use crate::par;
use crate::se3::PoseSE3;
use crate::trajectory::{StampedPose, Trajectory};

/// Maximum timestamp difference for associating two poses.
pub const ASSOCIATION_WINDOW_NS: i64 = 10_000_000;

/// Pairs each estimate pose with the nearest ground-truth pose within the
/// window. Ties go to the earlier ground-truth pose.
pub fn associate(
    gt: &Trajectory,
    est: &Trajectory,
    window_ns: i64,
) -> Vec<(StampedPose, StampedPose)> {
    let mut g: Vec<StampedPose> = gt.poses.clone();
    g.sort_by_key(|s| s.timestamp_ns);
    let mut out = Vec::new();
    for e in &est.poses {
        let i = g.partition_point(|s| s.timestamp_ns < e.timestamp_ns);
        let cands = [i.checked_sub(1), (i < g.len()).then_some(i)];
        let best = cands
            .into_iter()
            .flatten()
            .min_by_key(|&j| ((g[j].timestamp_ns - e.timestamp_ns).abs(), j));
        if let Some(j) = best {
            if (g[j].timestamp_ns - e.timestamp_ns).abs() <= window_ns {
                out.push((g[j], *e));
            }
        }
    }
    out
}

/// Rigid transform `(R, t)` minimizing `sum |dst - (R src + t)|^2`.
pub fn umeyama_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> PoseSE3 {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - ms) * (d - md).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    PoseSE3::new(r, md - r * ms)
}

/// RMSE of translation residuals after rigid alignment of `est` onto `gt`.
pub fn ate_rmse(gt: &Trajectory, est: &Trajectory) -> Result<f64> {
    let pairs = associate(gt, est, ASSOCIATION_WINDOW_NS);
    if pairs.len() < 2 {
        return Err(Error::Metric(format!(
            "ATE needs at least 2 associated poses, found {}",
            pairs.len()
        )));
    }
    let g: Vec<Vector3<f64>> = pairs.iter().map(|(g, _)| g.pose.translation).collect();
    let e: Vec<Vector3<f64>> = pairs.iter().map(|(_, e)| e.pose.translation).collect();
    let align = umeyama_rigid(&e, &g);
    let sq: f64 = e
        .iter()
        .zip(&g)
        .map(|(e, g)| (g - align.transform_point(e)).norm_squared())
        .sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RpeSeries {
    /// Meters.
    pub trans: Vec<f64>,
    /// Degrees.
    pub rot: Vec<f64>,
}

impl RpeSeries {
    pub fn trans_rmse(&self) -> f64 {
        rms(&self.trans)
    }

    pub fn rot_rmse(&self) -> f64 {
        rms(&self.rot)
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Relative pose error over `delta` associated frames.
pub fn rpe(gt: &Trajectory, est: &Trajectory, delta: usize) -> Result<RpeSeries> {
    let pairs = associate(gt, est, ASSOCIATION_WINDOW_NS);
    if delta == 0 || delta >= pairs.len() {
        return Err(Error::Metric(format!(
            "RPE delta {delta} must be in 1..{} (associated poses)",
            pairs.len()
        )));
    }
    let mut out = RpeSeries::default();
    for i in 0..pairs.len() - delta {
        let (g0, e0) = &pairs[i];
        let (g1, e1) = &pairs[i + delta];
        let dg = g0.pose.inverse() * g1.pose;
        let de = e0.pose.inverse() * e1.pose;
        let err = dg.inverse() * de;
        out.trans.push(err.translation.norm());
        out.rot.push(err.rotation_angle().to_degrees());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub thresholds: Vec<f64>,
    /// `per_pair[k][j]`: fraction of frame `k+1` points whose nearest neighbor
    /// in frame `k` is closer than `thresholds[j]`.
    pub per_pair: Vec<Vec<f64>>,
    pub average: Vec<f64>,
}

/// Nearest-neighbor consistency of consecutive registered frames. Empty
/// frames are skipped.
pub fn consistency_ratio(
    frames: &[Vec<Vector3<f64>>],
    thresholds: &[f64],
) -> Result<ConsistencyReport> {
    let kept: Vec<&Vec<Vector3<f64>>> = frames
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            if f.is_empty() {
                log::warn!("frame {i} is empty, skipped");
                None
            } else {
                Some(f)
            }
        })
        .collect();
    if kept.len() < 2 {
        return Err(Error::Metric(format!(
            "consistency needs at least 2 non-empty frames, found {}",
            kept.len()
        )));
    }
    if thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidParameter(
            "consistency thresholds must be > 0".into(),
        ));
    }
    let pairs: Vec<usize> = (1..kept.len()).collect();
    let per_pair = par::map(&pairs, |&k| {
        let tree = KdTree::build(kept[k - 1].clone());
        let dists: Vec<f64> = kept[k]
            .iter()
            .map(|p| tree.nearest(p).map_or(f64::INFINITY, |n| n.dist2.sqrt()))
            .collect();
        thresholds
            .iter()
            .map(|t| dists.iter().filter(|d| **d < *t).count() as f64 / dists.len() as f64)
            .collect::<Vec<f64>>()
    });
    let average = (0..thresholds.len())
        .map(|j| per_pair.iter().map(|r| r[j]).sum::<f64>() / per_pair.len() as f64)
        .collect();
    Ok(ConsistencyReport {
        thresholds: thresholds.to_vec(),
        per_pair,
        average,
    })
}

/// Reads every `*.ply` in `dir`, in file-name order.
pub fn read_frames(dir: &Path) -> Result<Vec<Vec<Vector3<f64>>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            Ok(crate::io::read_colored_ply(p)?
                .into_iter()
                .map(|m| m.position)
                .collect())
        })
        .collect()
}

/// Summary written by the evaluation commands.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpe: Option<RpeSeries>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyReport>,
}
