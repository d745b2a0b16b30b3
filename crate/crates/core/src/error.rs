use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the ingestion, graph, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: expected {expected} cells, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {column}: cannot parse {text:?} as a number")]
    BadCell {
        row: usize,
        column: usize,
        text: String,
    },

    #[error("row {row}, column {column}: abundance {value} is negative or not finite")]
    BadAbundance { row: usize, column: usize, value: f64 },

    #[error("duplicate {what} identifier {name:?}")]
    Duplicate { what: &'static str, name: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("labels: {0}")]
    Labels(String),

    #[error("every feature was removed by the low-abundance filter; relax the abundance or host-count threshold")]
    AllFeaturesRemoved,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("zero denominator: {0}")]
    ZeroDenominator(&'static str),

    #[error("degenerate distances: every off-diagonal distance equals {0}, min-max rescaling is undefined")]
    DegenerateDistances(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}; last finite losses: {trace:?}")]
    NonFiniteLoss { epoch: usize, trace: Vec<f64> },

    #[error("training fold contains a single class; both classes are required")]
    SingleClass,

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity: {0}")]
    CheckpointIntegrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, source: Error) -> Self {
        Error::InFile {
            path: path.into(),
            source: Box::new(source),
        }
    }
}
