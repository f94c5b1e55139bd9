use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("row {0} sums to a non-positive value; cannot normalize")]
    DegenerateRow(usize),

    #[error("column {0} sums to a non-positive value; cannot normalize")]
    DegenerateColumn(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("duplicate pair id `{0}` in manifest")]
    DuplicateId(String),

    #[error("batch_size ≥ 2 required, got {0}")]
    BatchTooSmall(usize),

    #[error("no queries to evaluate")]
    EmptyQuerySet,

    #[error("index {index} out of range for gallery of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("geo tags missing for {0}")]
    MissingGeoTags(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_sample(self, index: usize) -> Self {
        match self {
            e @ Error::Sample { .. } => e,
            e => Error::Sample {
                index,
                source: Box::new(e),
            },
        }
    }

    /// Whether the error stems from user input (bad flags, config, files)
    /// rather than a numeric failure during a run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Format(_)
            | Error::InvalidPermutation(_)
            | Error::DuplicateId(_)
            | Error::BatchTooSmall(_)
            | Error::MissingGeoTags(_)
            | Error::Config(_)
            | Error::UnknownStrategy { .. }
            | Error::Io { .. }
            | Error::Json(_) => true,
            Error::Sample { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
