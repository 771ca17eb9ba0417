use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint field `{field}`: {detail}")]
    Checkpoint { field: &'static str, detail: String },

    #[error("checkpoint config mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("distance unavailable for constraint `{0}`")]
    DistanceUnavailable(String),

    #[error("oracle {kind} after {attempts} attempt(s): {detail} (raw: {raw:?})")]
    Oracle {
        kind: OracleFailure,
        attempts: u32,
        detail: String,
        raw: Vec<u8>,
    },

    #[error("rejection sampling exhausted {attempts} attempts for {sampler}")]
    RejectionExhausted { sampler: &'static str, attempts: u64 },

    #[error("trajectory contract: {0}")]
    Contract(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleFailure {
    Timeout,
    Malformed,
    ProcessExit,
    Io,
}

impl std::fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OracleFailure::Timeout => "timeout",
            OracleFailure::Malformed => "malformed reply",
            OracleFailure::ProcessExit => "process exit",
            OracleFailure::Io => "transport error",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
