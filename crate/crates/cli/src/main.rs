//! `carloam` command line: batch odometry, trajectory/map evaluation and
//! synthetic dataset generation.
//!
//! Exit codes: 0 success, 2 input error, 3 run finished with low-confidence
//! (degenerate) scans.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carloam::camera::CameraModel;
use carloam::eval::metrics::read_frames;
use carloam::eval::{ate_rmse, consistency_ratio, generate, rpe, MetricReport, SyntheticScene};
use carloam::par;
use carloam::pipeline::{run, DatasetManifest, PipelineConfig};
use carloam::trajectory::Trajectory;
use clap::{Parser, Subcommand};

const EXIT_INPUT: u8 = 2;
const EXIT_LOW_CONFIDENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "carloam",
    version,
    about = "Color-assisted robust LiDAR odometry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a dataset manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Camera calibration JSON. Without it the run is LiDAR-only.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Pipeline configuration JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Trajectory and map metrics. Prints a JSON report.
    Eval {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Write a synthetic dataset with ground truth.
    Synth {
        /// Scene JSON file, or `faceted_room` for the built-in scene.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame count for the built-in scene.
        #[arg(long, default_value_t = 50)]
        frames: usize,
    },
}

#[derive(Subcommand)]
enum Metric {
    /// Absolute trajectory error (RMSE after rigid alignment, meters).
    Ate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
    },
    /// Relative pose error over `delta` frames.
    Rpe {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Also write the per-pair series as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Nearest-neighbor consistency of consecutive registered frames.
    Consistency {
        /// Directory of registered frames (`*.ply`).
        #[arg(long)]
        frames: PathBuf,
        /// Distance thresholds in meters.
        #[arg(long, value_delimiter = ',', default_value = "0.0001,0.0005,0.001")]
        thresholds: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

fn execute(command: Command) -> carloam::Result<ExitCode> {
    match command {
        Command::Run {
            manifest,
            calib,
            config,
            out,
            threads,
        } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            let camera = calib.as_deref().map(CameraModel::load).transpose()?;
            let manifest = DatasetManifest::load(&manifest)?;
            let res = par::with_threads(threads, || run(&manifest, camera, &cfg, &out, None))?;
            println!("{}", res.trajectory_path.display());
            if res.has_low_confidence() {
                log::error!(
                    "{} low-confidence scan(s): {:?}",
                    res.report.low_confidence.len(),
                    res.report.low_confidence
                );
                return Ok(ExitCode::from(EXIT_LOW_CONFIDENCE));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { metric } => {
            let report = match metric {
                Metric::Ate { gt, est } => MetricReport {
                    ate_rmse: Some(ate_rmse(
                        &Trajectory::read_tum(&gt)?,
                        &Trajectory::read_tum(&est)?,
                    )?),
                    ..Default::default()
                },
                Metric::Rpe {
                    gt,
                    est,
                    delta,
                    csv,
                } => {
                    let s = rpe(
                        &Trajectory::read_tum(&gt)?,
                        &Trajectory::read_tum(&est)?,
                        delta,
                    )?;
                    if let Some(path) = csv {
                        let rows = s.trans.iter().zip(&s.rot).map(|(t, r)| vec![*t, *r]);
                        write_csv(&path, &["trans_m", "rot_deg"], rows)?;
                    }
                    MetricReport {
                        rpe: Some(s),
                        ..Default::default()
                    }
                }
                Metric::Consistency {
                    frames,
                    thresholds,
                    csv,
                } => {
                    let c = consistency_ratio(&read_frames(&frames)?, &thresholds)?;
                    if let Some(path) = csv {
                        let header: Vec<String> =
                            thresholds.iter().map(|t| format!("ratio_{t}")).collect();
                        let header: Vec<&str> = header.iter().map(String::as_str).collect();
                        write_csv(&path, &header, c.per_pair.iter().cloned())?;
                    }
                    MetricReport {
                        consistency: Some(c),
                        ..Default::default()
                    }
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            scene,
            out,
            seed,
            frames,
        } => {
            let scene = match scene.as_str() {
                "faceted_room" => SyntheticScene::faceted_room(frames),
                path => SyntheticScene::load(Path::new(path))?,
            };
            let data = generate(&scene, seed, &out)?;
            println!("{}", data.manifest.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> carloam::Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    carloam::io::write_atomic(path, text.as_bytes())
}
