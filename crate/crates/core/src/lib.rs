//! Color-assisted robust LiDAR odometry.

pub mod camera;
pub mod color;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod map;
pub mod optimizer;
pub mod par;
pub mod pipeline;
pub mod robust;
pub mod se3;
pub mod trajectory;

pub use error::{Error, Result};
