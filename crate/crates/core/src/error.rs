use std::path::PathBuf;

/// Errors produced by the odometry library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {reason}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("no lidar entries in manifest")]
    NoLidarEntries,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(
        what: &'static str,
        path: impl Into<PathBuf>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Malformed {
            what,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by bad user input (missing files, bad formats,
    /// bad parameters) as opposed to internal failures.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Metric(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
