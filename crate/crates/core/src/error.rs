use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate bounding box: {0}")]
    DegenerateBox(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds the context limit {limit}")]
    Length { len: usize, limit: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{gate} gate failed: {report}")]
    Gate { gate: &'static str, report: String },

    #[error("checksum mismatch in {what}: expected {expected:08x}, found {found:08x}")]
    Checksum {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("pairing mismatch: {0}")]
    Pairing(String),

    #[error("frozen-contract violation: {0}")]
    Frozen(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Gate { .. } => 3,
            Error::Checksum { .. }
            | Error::Pairing(_)
            | Error::Frozen(_)
            | Error::Format { .. } => 4,
            _ => 1,
        }
    }
}
