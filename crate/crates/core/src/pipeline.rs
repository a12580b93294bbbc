//! Batch odometry driver: manifest ingestion, scan/image pairing, per-scan
//! extract / colorize / align / insert, and output writing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{assign_colors, CameraModel, Image, Point};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureCloud, FeatureConfig};
use crate::io::{read_scan, write_atomic, write_colored_ply};
use crate::map::{GlobalMap, MapConfig, MapPart, MapPoint};
use crate::optimizer::{align, AlignmentStatus, InlierStats, OptimizerConfig};
use crate::se3::PoseSE3;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub optimizer: OptimizerConfig,
    pub map: MapConfig,
    /// Use camera images to color features. Off reproduces a pure-LiDAR run.
    pub coloring: bool,
    /// Largest scan/image timestamp gap accepted for pairing.
    pub max_pairing_gap_ms: f64,
    /// Write every registered scan to `frames/`.
    pub write_frames: bool,
    pub trajectory_file: String,
    pub map_file: String,
    pub report_file: String,
    pub frames_dir: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            optimizer: OptimizerConfig::default(),
            map: MapConfig::default(),
            coloring: true,
            max_pairing_gap_ms: 100.0,
            write_frames: true,
            trajectory_file: "trajectory.tum".into(),
            map_file: "map.ply".into(),
            report_file: "report.json".into(),
            frames_dir: "frames".into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.map.validate()?;
        if !(self.max_pairing_gap_ms >= 0.0) {
            return Err(Error::InvalidParameter(
                "max_pairing_gap_ms must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::malformed("config", path, j.to_string()),
            other => other,
        })
    }

    fn max_gap_ns(&self) -> i64 {
        (self.max_pairing_gap_ms * 1e6).round() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Lidar,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: EntryKind,
    pub timestamp_ns: i64,
    pub path: PathBuf,
}

/// Scan and image list from a `kind,timestamp_ns,path` CSV. Relative paths
/// are resolved against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    kind: String,
    timestamp_ns: i64,
    path: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| Error::malformed("manifest", path, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["kind", "timestamp_ns", "path"] {
            return Err(Error::malformed(
                "manifest",
                path,
                "header must be 'kind,timestamp_ns,path'",
            ));
        }
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
            let row =
                row.map_err(|e| Error::malformed("manifest", path, format!("row {}: {e}", i + 2)))?;
            let kind = match row.kind.to_ascii_lowercase().as_str() {
                "lidar" => EntryKind::Lidar,
                "image" => EntryKind::Image,
                other => {
                    return Err(Error::malformed(
                        "manifest",
                        path,
                        format!("row {}: unknown kind '{other}'", i + 2),
                    ))
                }
            };
            let p = PathBuf::from(&row.path);
            entries.push(ManifestEntry {
                kind,
                timestamp_ns: row.timestamp_ns,
                path: if p.is_absolute() { p } else { base.join(p) },
            });
        }
        Ok(Self { entries })
    }

    /// Entries of one kind, sorted by timestamp (stable).
    pub fn of_kind(&self, kind: EntryKind) -> Vec<ManifestEntry> {
        let mut v: Vec<ManifestEntry> = self
            .entries
            .iter()
            .filter(|e| e.kind == kind)
            .cloned()
            .collect();
        v.sort_by_key(|e| e.timestamp_ns);
        v
    }
}

/// The image closest in time to `scan_ts`, if within `max_gap_ns`. Ties go to
/// the earlier image.
pub fn pair_image(
    scan_ts: i64,
    images: &[ManifestEntry],
    max_gap_ns: i64,
) -> Option<&ManifestEntry> {
    images
        .iter()
        .filter(|e| e.kind == EntryKind::Image)
        .min_by_key(|e| ((e.timestamp_ns - scan_ts).unsigned_abs(), e.timestamp_ns))
        .filter(|e| (e.timestamp_ns - scan_ts).unsigned_abs() <= max_gap_ns as u64)
}

/// Per-scan record in the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub index: usize,
    pub timestamp_ns: i64,
    pub image: Option<PathBuf>,
    pub points: usize,
    pub edges: usize,
    pub planars: usize,
    pub colored_features: usize,
    /// An image was paired but no feature received a color.
    pub color_fallback: bool,
    pub degenerate_features: bool,
    pub status: Option<AlignmentStatus>,
    pub iterations: usize,
    pub final_cost: f64,
    pub inlier_stats: InlierStats,
    pub low_confidence: bool,
    pub elapsed_ms: f64,
}

/// Called with `(scan index, timestamp, features)` between extraction and
/// alignment.
pub type FeatureHook<'a> = dyn FnMut(usize, i64, &mut FeatureCloud) + 'a;

/// Sequential scan-to-map odometry state.
#[derive(Debug, Clone)]
pub struct Odometry {
    cfg: PipelineConfig,
    camera: Option<CameraModel>,
    map: GlobalMap,
    trajectory: Trajectory,
    low_confidence: Vec<usize>,
    reports: Vec<ScanReport>,
}

impl Odometry {
    pub fn new(cfg: PipelineConfig, camera: Option<CameraModel>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            map: GlobalMap::new(cfg.map.clone())?,
            cfg,
            camera,
            trajectory: Trajectory::default(),
            low_confidence: Vec::new(),
            reports: Vec::new(),
        })
    }

    pub fn map(&self) -> &GlobalMap {
        &self.map
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn low_confidence(&self) -> &[usize] {
        &self.low_confidence
    }

    pub fn reports(&self) -> &[ScanReport] {
        &self.reports
    }

    fn initial_guess(&self) -> PoseSE3 {
        let p = &self.trajectory.poses;
        match p.len() {
            0 | 1 => p.last().map_or(PoseSE3::identity(), |s| s.pose),
            n => {
                let (a, b) = (p[n - 2].pose, p[n - 1].pose);
                b * (a.inverse() * b)
            }
        }
    }

    /// Processes one scan and returns its world pose.
    pub fn process(
        &mut self,
        scan: &[Point],
        timestamp_ns: i64,
        image: Option<&Image>,
        hook: Option<&mut FeatureHook>,
    ) -> PoseSE3 {
        let start = Instant::now();
        let index = self.trajectory.len();
        let mut features = extract_features(scan, &self.cfg.features);
        features.timestamp_ns = timestamp_ns;
        if let Some(h) = hook {
            h(index, timestamp_ns, &mut features);
        }
        let degenerate_features = features.is_degenerate();
        if degenerate_features {
            log::warn!(
                "scan {index}: only {} edges / {} planars",
                features.edges.len(),
                features.planars.len()
            );
        }

        let mut colored = 0;
        let image = image.filter(|_| self.cfg.coloring);
        if let (Some(img), Some(cam)) = (image, &self.camera) {
            colored += assign_colors(cam, img, &mut features.edges);
            colored += assign_colors(cam, img, &mut features.planars);
        }
        let color_fallback = image.is_some() && colored == 0;
        if color_fallback {
            log::warn!("scan {index}: paired image colors no feature; using neutral weights");
        }

        let mut report = ScanReport {
            index,
            timestamp_ns,
            image: None,
            points: scan.len(),
            edges: features.edges.len(),
            planars: features.planars.len(),
            colored_features: colored,
            color_fallback,
            degenerate_features,
            status: None,
            iterations: 0,
            final_cost: 0.0,
            inlier_stats: InlierStats::default(),
            low_confidence: false,
            elapsed_ms: 0.0,
        };

        let pose = if index == 0 {
            PoseSE3::identity()
        } else {
            let guess = self.initial_guess();
            let res = align(&features, &self.map, &guess, &self.cfg.optimizer);
            report.status = Some(res.status);
            report.iterations = res.iterations;
            report.final_cost = res.final_cost;
            report.inlier_stats = res.inlier_stats;
            if res.is_reliable() {
                res.pose
            } else {
                log::warn!(
                    "scan {index}: alignment {:?}, keeping the initial guess",
                    res.status
                );
                report.low_confidence = true;
                self.low_confidence.push(index);
                guess
            }
        };
        self.map.insert(&features, &pose);
        self.trajectory.push(timestamp_ns, pose);
        report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        self.reports.push(report);
        pose
    }

    fn annotate_last(&mut self, image: Option<PathBuf>) {
        if let Some(r) = self.reports.last_mut() {
            r.image = image;
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scans: Vec<ScanReport>,
    pub low_confidence: Vec<usize>,
    pub skipped: Vec<PathBuf>,
    pub map_edges: usize,
    pub map_planars: usize,
    pub threads: usize,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub report: RunReport,
    pub trajectory_path: PathBuf,
    pub map_path: PathBuf,
    pub report_path: PathBuf,
}

impl RunOutput {
    pub fn has_low_confidence(&self) -> bool {
        !self.report.low_confidence.is_empty()
    }
}

/// Runs the whole manifest and writes the outputs under `out`.
pub fn run(
    manifest: &DatasetManifest,
    camera: Option<CameraModel>,
    cfg: &PipelineConfig,
    out: &Path,
    mut hook: Option<&mut FeatureHook>,
) -> Result<RunOutput> {
    let start = Instant::now();
    let scans = manifest.of_kind(EntryKind::Lidar);
    if scans.is_empty() {
        return Err(Error::NoLidarEntries);
    }
    let images = manifest.of_kind(EntryKind::Image);
    let mut odo = Odometry::new(cfg.clone(), camera)?;
    let mut skipped = Vec::new();
    let mut frames: Vec<Vec<MapPoint>> = Vec::new();
    let mut last_ts = None;

    for entry in &scans {
        if last_ts == Some(entry.timestamp_ns) {
            log::warn!(
                "{}: duplicate scan timestamp, skipped",
                entry.path.display()
            );
            skipped.push(entry.path.clone());
            continue;
        }
        let scan = match read_scan(&entry.path, entry.timestamp_ns) {
            Ok(s) => s,
            Err(e @ Error::Malformed { .. }) => {
                log::warn!("{e}; scan skipped");
                skipped.push(entry.path.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let paired = if cfg.coloring && odo.camera.is_some() {
            pair_image(entry.timestamp_ns, &images, cfg.max_gap_ns())
        } else {
            None
        };
        let image = match paired {
            Some(p) => match Image::load(&p.path, p.timestamp_ns) {
                Ok(img) => Some(img),
                Err(e @ Error::Malformed { .. }) => {
                    log::warn!("{e}; scan proceeds without color");
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let pose = odo.process(
            &scan,
            entry.timestamp_ns,
            image.as_ref(),
            hook.as_deref_mut(),
        );
        odo.annotate_last(image.as_ref().and(paired.map(|p| p.path.clone())));
        last_ts = Some(entry.timestamp_ns);

        if cfg.write_frames {
            let mut colored = scan.clone();
            if let (Some(img), Some(cam)) = (&image, &odo.camera) {
                assign_colors(cam, img, &mut colored);
            }
            frames.push(
                colored
                    .iter()
                    .map(|p| MapPoint::new(pose.transform_point(&p.position), p.color))
                    .collect(),
            );
        }
    }

    let trajectory = odo.trajectory().clone();
    let trajectory_path = out.join(&cfg.trajectory_file);
    let map_path = out.join(&cfg.map_file);
    let report_path = out.join(&cfg.report_file);
    trajectory.write_tum(&trajectory_path, odo.low_confidence())?;
    let mut map_points: Vec<MapPoint> = odo.map().store(MapPart::Edge).points().to_vec();
    map_points.extend_from_slice(odo.map().store(MapPart::Planar).points());
    write_colored_ply(&map_path, &map_points)?;
    if cfg.write_frames {
        let dir = out.join(&cfg.frames_dir);
        for (i, f) in frames.iter().enumerate() {
            write_colored_ply(&dir.join(format!("{i:06}.ply")), f)?;
        }
    }
    let report = RunReport {
        scans: odo.reports().to_vec(),
        low_confidence: odo.low_confidence().to_vec(),
        skipped,
        map_edges: odo.map().store(MapPart::Edge).len(),
        map_planars: odo.map().store(MapPart::Planar).len(),
        threads: crate::par::current_threads(),
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_atomic(
        &report_path,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(RunOutput {
        trajectory,
        report,
        trajectory_path,
        map_path,
        report_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn img(ts_ms: i64) -> ManifestEntry {
        ManifestEntry {
            kind: EntryKind::Image,
            timestamp_ns: ts_ms * 1_000_000,
            path: PathBuf::from(format!("{ts_ms}.png")),
        }
    }

    #[test]
    fn pairing_rules() {
        let gap = 100_000_000;
        let imgs = vec![img(980), img(1050)];
        assert_eq!(
            pair_image(1_000_000_000, &imgs, gap).unwrap().timestamp_ns,
            980_000_000
        );
        assert!(pair_image(1_000_000_000, &[], gap).is_none());
        let tie = vec![img(1050), img(950)];
        assert_eq!(
            pair_image(1_000_000_000, &tie, gap).unwrap().timestamp_ns,
            950_000_000
        );
        assert!(pair_image(1_000_000_000, &[img(1200)], gap).is_none());
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(
            &m,
            "kind,timestamp_ns,path\nlidar,200,b.ply\nimage,150,i.png\nlidar,100,/abs/a.ply\n",
        )
        .unwrap();
        let man = DatasetManifest::load(&m).unwrap();
        let l = man.of_kind(EntryKind::Lidar);
        assert_eq!(l[0].path, PathBuf::from("/abs/a.ply"));
        assert_eq!(l[1].path, dir.path().join("b.ply"));
        std::fs::write(&m, "kind,ts,path\n").unwrap();
        assert!(DatasetManifest::load(&m).is_err());
        std::fs::write(&m, "kind,timestamp_ns,path\nradar,1,x\n").unwrap();
        assert!(DatasetManifest::load(&m).is_err());
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = run(
            &DatasetManifest::default(),
            None,
            &PipelineConfig::default(),
            dir.path(),
            None,
        );
        assert!(matches!(r, Err(Error::NoLidarEntries)));
    }

    #[test]
    fn config_round_trip_and_rejection() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        let partial =
            PipelineConfig::from_json(r#"{"optimizer": {"welsch_enabled": false}}"#).unwrap();
        assert!(!partial.optimizer.welsch_enabled);
        assert_eq!(partial.optimizer.max_iterations, 20);
        assert!(PipelineConfig::from_json(r#"{"optimizer": {"nu": -1}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"colouring": true}"#).is_err());
    }

    #[test]
    fn first_scan_anchors_identity() {
        let mut odo = Odometry::new(PipelineConfig::default(), None).unwrap();
        let scan: Vec<Point> = (0..50)
            .map(|i| Point::new(Vector3::new(3.0, -1.0 + 0.04 * i as f64, 0.0), 1.0))
            .collect();
        assert_eq!(odo.process(&scan, 5, None, None), PoseSE3::identity());
        assert_eq!(odo.trajectory().len(), 1);
    }
}
