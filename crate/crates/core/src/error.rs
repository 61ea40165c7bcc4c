use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid path {0:?}")]
    InvalidPath(PathBuf),

    #[error("corrupt dataset header: {0}")]
    CorruptHeader(String),

    #[error("channel count mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("truncated tensor payload in record {record}")]
    TruncatedPayload { record: usize },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("point ({x}, {y}) is out of bounds")]
    OutOfBounds { x: usize, y: usize },

    #[error("no material at ({x}, {y})")]
    EmptySurface { x: usize, y: usize },

    #[error("fill of {requested_g:.1} g exceeds tray capacity of {capacity_g:.1} g")]
    OverCapacity { requested_g: f64, capacity_g: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Model,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::OverCapacity { .. } => ErrorKind::Config,
            Error::InvalidPath(_)
            | Error::CorruptHeader(_)
            | Error::ChannelMismatch { .. }
            | Error::TruncatedPayload { .. }
            | Error::Csv(_) => ErrorKind::Data,
            Error::CorruptModel(_) | Error::Shape { .. } | Error::Diverged { .. } => {
                ErrorKind::Model
            }
            Error::OutOfBounds { .. }
            | Error::EmptySurface { .. }
            | Error::Invalid(_)
            | Error::Io(_) => ErrorKind::Runtime,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Model => 4,
            ErrorKind::Runtime => 5,
        }
    }
}
