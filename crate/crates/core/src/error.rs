use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("mask sampling failed after {tries} tries (last area fraction {last_fraction:.4}); change the lattice resolution or threshold")]
    MaskSampling { tries: usize, last_fraction: f64 },

    #[error("checkpoint error at byte offset {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    #[error("checkpoint incompatible: expected {expected}, found {found}")]
    IncompatibleCheckpoint { expected: String, found: String },

    #[error("data contract violation: {0}")]
    DataContract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    /// Process exit code for the CLI: 1 usage, 2 data contract, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DataContract(_) | Error::Image { .. } | Error::MaskSampling { .. } => 2,
            Error::Numerical(_) => 3,
            Error::Checkpoint { .. } | Error::IncompatibleCheckpoint { .. } => 2,
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}
