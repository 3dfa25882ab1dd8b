use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by model construction, data handling, and the pipeline
/// commands built on top of them.
#[derive(Debug, Error)]
pub enum TrackError {
    #[error(transparent)]
    Tensor(#[from] prl_tensor::TensorError),

    /// A configuration value or combination the pipeline cannot run with.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Filesystem access failed for a path we name explicitly.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A text file (ground truth, results, metadata) failed to parse.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Inputs that are individually valid but inconsistent with each other.
    #[error("{0}")]
    Data(String),

    /// A frame image could not be read during tracking.
    #[error("frame {index} ({path}): {source}")]
    Frame {
        index: usize,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrackError>;

impl TrackError {
    /// Exit code the command-line tool maps this error to: 2 for I/O
    /// failures, 1 for validation and data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrackError::Io { .. } | TrackError::Frame { .. } => 2,
            TrackError::Tensor(prl_tensor::TensorError::Io(_)) => 2,
            _ => 1,
        }
    }
}

/// Wraps an I/O error with the path it occurred on.
pub fn io_err(path: impl Into<PathBuf>, source: io::Error) -> TrackError {
    TrackError::Io {
        path: path.into(),
        source,
    }
}
