use std::path::PathBuf;

use crate::rfs_core::Label;

/// Errors surfaced by the tracker, the birth sampler and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid measurement tuple: {0}")]
    InvalidTuple(String),

    #[error("target coincides with sensor {sensor} position")]
    DegenerateGeometry { sensor: usize },

    #[error("clutter intensity is zero at measurement {index} of sensor {sensor}")]
    ZeroClutter { sensor: usize, index: usize },

    #[error("particle weights sum to zero, cannot normalize")]
    CannotNormalize,

    #[error("label {0} already present in the density")]
    LabelCollision(Label),

    #[error("runs were generated from different scenario seeds ({baseline} vs {candidate})")]
    SeedMismatch { baseline: u64, candidate: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
