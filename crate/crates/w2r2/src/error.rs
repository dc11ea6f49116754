use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. CLI exit codes are derived from the variant.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/operation shape violation (also covers shape-incompatible checkpoints).
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward operation produced NaN or infinity from finite inputs.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training loss became non-finite; carries the offending sample index.
    #[error("non-finite loss at step {step} (batch sample {sample})")]
    NonFiniteLoss { step: u64, sample: usize },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Structurally invalid data (datasets, splits, grids).
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure with the path that caused it.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Parse failure in a text artifact, with line context.
    #[error("{}:{line}: {detail}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    /// Every sweep cell failed.
    #[error("sweep failed: no cell completed")]
    SweepFailed,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable exit code contract: 2 config, 3 I/O, 4 numeric, 5 sweep failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Data(_) | Error::Parse { .. } => 2,
            Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 4,
            Error::SweepFailed => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
