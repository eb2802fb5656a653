use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trace too short: need at least 2 entries, got {0}")]
    TraceTooShort(usize),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {index} is not a convolution")]
    NotConv { index: usize },
    #[error("empty statistics: {0}")]
    EmptyStats(String),
    #[error("need at least 2 nonempty groups, got {0}")]
    TooFewGroups(usize),
    #[error("degenerate energy profile: all layer energies are zero")]
    DegenerateEnergy,
    #[error("empty candidate set")]
    EmptyCandidateSet,
    #[error("layer {0} not restrictable: accuracy constraint unmet even with all 256 values")]
    NotRestrictable(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("dataset format error: {0}")]
    DatasetFormat(String),
    #[error("missing profile data: {0}")]
    MissingProfile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
