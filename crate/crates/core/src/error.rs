use std::path::PathBuf;

use crate::geo::CellId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("invalid cell id `{0}`")]
    InvalidCell(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cell {0} is not present in the location index")]
    UnknownCell(CellId),

    #[error("row {row} out of range for {len} rows")]
    RowOutOfRange { row: usize, len: usize },

    #[error("no candidates left for negative sampling after exclusion")]
    NoNegativeCandidates,

    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,

    #[error("no region has more than {k} members")]
    NoEligibleRegions { k: usize },

    #[error("full softmax restricted to at most {limit} locations, got {n}")]
    TooManyLocations { n: usize, limit: usize },

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("digest mismatch for {path}: manifest has {expected}, file has {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Errors caused by bad user input, as opposed to failures inside the
    /// pipeline. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Json(_) | Error::Io(_)
        )
    }
}
