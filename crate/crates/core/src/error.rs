use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("insufficient data: {what} requires {required}, got {available}")]
    InsufficientData {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("week alignment error: {0}")]
    Alignment(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing weeks for {country}: {weeks}")]
    MissingWeeks { country: String, weeks: String },

    #[error("missing trends files for queries: {0:?}")]
    MissingQueries(Vec<String>),

    #[error("query `{0}` is constant over the training range")]
    DegenerateQuery(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("word `{0}` is not in the embedding vocabulary")]
    OutOfVocabulary(String),

    #[error("query `{0}` has no content words after stopword removal")]
    EmptyContent(String),

    #[error("no candidate with trends data for query `{0}`")]
    SelectionFailure(String),

    #[error("mapping file has no row for query `{0}`")]
    IncompleteMapping(String),

    #[error("unknown country `{0}`")]
    UnknownCountry(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }
}
