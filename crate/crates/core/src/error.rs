use thiserror::Error;

use crate::grid::CellId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("cell {index} is outside a grid of {n} cells")]
    CellOutOfRange { index: usize, n: usize },

    #[error("malformed XML at line {line}: {message}")]
    Xml { line: usize, message: String },

    #[error("bad header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("category mapping line {line}: {message}")]
    Mapping { line: usize, message: String },

    #[error("cell {0} holds no POIs; tf-idf is undefined there")]
    EmptyCell(CellId),

    #[error("feature `{0}` does not occur in the corpus")]
    UnknownFeature(String),

    #[error("record {row}: {message}")]
    Record { row: usize, message: String },

    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    #[error("need more than {needed} usable cells, have {have}")]
    TooFewVertices { needed: usize, have: usize },

    #[error("vertex {0} has zero degree; normalized Laplacian is undefined")]
    ZeroDegree(usize),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("eigenpair {index} residual {residual:e} exceeds tolerance {bound:e}")]
    Residual {
        index: usize,
        residual: f64,
        bound: f64,
    },

    #[error("singular covariance block `{0}`; use a ridge > 0")]
    SingularCovariance(&'static str),

    #[error("invalid polygon in feature {feature}: {message}")]
    InvalidPolygon { feature: String, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerical routines rather than of the data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence(_)
                | Error::Residual { .. }
                | Error::NotSymmetric(_)
                | Error::SingularCovariance(_)
                | Error::ZeroDegree(_)
        )
    }
}
