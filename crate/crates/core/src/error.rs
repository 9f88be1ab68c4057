use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible while building a graph.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A non-finite value appeared in an activation or gradient.
    #[error("numeric fault in {op}: non-finite value")]
    NumericFault { op: String },

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient check invalidated: {0}")]
    GradCheckInvalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input audio, transcript or manifest could not be ingested.
    #[error("ingestion error in {field}: {reason}")]
    Ingestion { field: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// The evaluation protocol cannot be applied to the given data.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("bad {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short machine-readable kind, used by the CLI error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NumericFault { .. } => "numeric_fault",
            Error::Contract(_) => "contract",
            Error::GradCheckInvalid(_) => "grad_check_invalid",
            Error::Config(_) => "config",
            Error::Ingestion { .. } => "ingestion",
            Error::Validation(_) => "validation",
            Error::Protocol(_) => "protocol",
            Error::Format { .. } => "format",
            Error::Io { .. } | Error::RawIo(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Wav(_) => "wav",
        }
    }
}
