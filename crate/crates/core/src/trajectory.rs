//! Stamped pose sequences and the TUM text format
//! (`timestamp tx ty tz qx qy qz qw`, seconds, `#` comments).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::se3::PoseSE3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub timestamp_ns: i64,
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn push(&mut self, timestamp_ns: i64, pose: PoseSE3) {
        self.poses.push(StampedPose { timestamp_ns, pose });
    }

    /// Applies `g * pose` to every pose.
    pub fn transformed(&self, g: &PoseSE3) -> Trajectory {
        Trajectory::new(
            self.poses
                .iter()
                .map(|s| StampedPose {
                    timestamp_ns: s.timestamp_ns,
                    pose: *g * s.pose,
                })
                .collect(),
        )
    }

    /// TUM text. Poses whose index is in `low_confidence` are preceded by a
    /// comment line.
    pub fn to_tum(&self, low_confidence: &[usize]) -> String {
        let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (i, s) in self.poses.iter().enumerate() {
            if low_confidence.contains(&i) {
                let _ = writeln!(out, "# low-confidence {}", format_seconds(s.timestamp_ns));
            }
            let t = s.pose.translation;
            let q = s.pose.quaternion();
            let _ = writeln!(
                out,
                "{} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                format_seconds(s.timestamp_ns),
                t.x,
                t.y,
                t.z,
                q.i,
                q.j,
                q.k,
                q.w
            );
        }
        out
    }

    pub fn write_tum(&self, path: &Path, low_confidence: &[usize]) -> Result<()> {
        write_atomic(path, self.to_tum(low_confidence).as_bytes())
    }

    pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
        let mut poses = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let bad =
                |why: &str| Error::malformed("trajectory", path, format!("line {}: {why}", ln + 1));
            if tok.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let ts = parse_seconds(tok[0]).ok_or_else(|| bad("bad timestamp"))?;
            let v: std::result::Result<Vec<f64>, _> =
                tok[1..].iter().map(|s| s.parse::<f64>()).collect();
            let v = v.map_err(|_| bad("bad number"))?;
            if !v.iter().all(|x| x.is_finite()) {
                return Err(bad("non-finite value"));
            }
            let q = Quaternion::new(v[6], v[3], v[4], v[5]);
            if q.norm() < 1e-9 {
                return Err(bad("zero quaternion"));
            }
            let pose = PoseSE3::from_quaternion(
                &UnitQuaternion::from_quaternion(q),
                Vector3::new(v[0], v[1], v[2]),
            );
            poses.push(StampedPose {
                timestamp_ns: ts,
                pose,
            });
        }
        Ok(Trajectory { poses })
    }

    pub fn read_tum(path: &Path) -> Result<Trajectory> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tum(&text, path)
    }
}

/// Nanoseconds as decimal seconds with 9 fractional digits, exactly.
pub fn format_seconds(ns: i64) -> String {
    let sign = if ns < 0 { "-" } else { "" };
    let a = ns.unsigned_abs();
    format!("{sign}{}.{:09}", a / 1_000_000_000, a % 1_000_000_000)
}

/// Decimal seconds to nanoseconds; exact for plain decimal input.
pub fn parse_seconds(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let plain = !body.is_empty()
        && body.chars().all(|c| c.is_ascii_digit() || c == '.')
        && body.matches('.').count() <= 1;
    let ns = if plain {
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        let int: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
        let mut digits: String = frac.chars().take(9).collect();
        let round_up = frac.chars().nth(9).is_some_and(|c| c >= '5');
        while digits.len() < 9 {
            digits.push('0');
        }
        let frac: i64 = digits.parse().ok()?;
        int.checked_mul(1_000_000_000)?
            .checked_add(frac + round_up as i64)?
    } else {
        let v: f64 = body.parse().ok()?;
        if !v.is_finite() {
            return None;
        }
        (v * 1e9).round() as i64
    };
    Some(if neg { -ns } else { ns })
}
