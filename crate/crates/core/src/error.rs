use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot stratify: class {class} has {count} example(s), need at least 2")]
    Stratification { class: usize, count: usize },
    #[error("cannot build episode: {0}")]
    Episode(String),
    #[error("diagonal entry ({0}, {0}) of the similarity matrix is not stored")]
    DiagonalAccess(usize),
    #[error("duplicate id {0}")]
    DuplicateId(usize),
    #[error("no candidates left to retrieve from")]
    RetrievalEmpty,
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
