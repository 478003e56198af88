use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// An arcosh/arccos argument fell outside its guard band. This is a
    /// logic error upstream (a point left the hyperboloid), not roundoff.
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: angle={angle}, centroid={centroid}, hierarchy={hierarchy}, total={total}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        angle: f64,
        centroid: f64,
        hierarchy: f64,
        total: f64,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
