//! Synthetic data generation, in-memory benchmark runs and evaluation
//! metrics.

pub mod metrics;
pub mod sequence;
pub mod synth;

pub use metrics::{ate_rmse, consistency_ratio, rpe, ConsistencyReport, MetricReport, RpeSeries};
pub use sequence::{benchmark_config, run_sequence, Corruption, SequenceRun};
pub use synth::{
    generate, inject_outliers, Aabb, Dataset, LidarPattern, Patch, SceneFile, SyntheticScene,
};
