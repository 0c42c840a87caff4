use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("simulation produced no visible landmarks")]
    NoVisibleLandmarks,

    #[error("invalid calibration problem: {0}")]
    InvalidProblem(String),

    #[error("observation references unknown landmark {0}")]
    UnknownLandmark(u32),

    #[error("observation references frame {0} which has no pose")]
    UnknownFrame(u32),

    #[error("no input frames")]
    EmptyInput,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate landmark id {id}")]
    DuplicateId { path: String, line: usize, id: u32 },

    #[error("{path}:{line}: pose for frame {frame} is not a rigid rotation ({reason})")]
    NonRigidPose {
        path: String,
        line: usize,
        frame: u32,
        reason: String,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
