use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("triangular matrix is singular (zero diagonal at {index})")]
    Singular { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("natural-gradient step degenerate: diagonal stayed non-positive after {halvings} step halvings")]
    DegenerateStep { halvings: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot parse {value:?} as a number at row {row}, column {col}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("{path}: no column named {name:?}")]
    MissingColumn { path: PathBuf, name: String },

    #[error("{path}: malformed CSV: {detail}")]
    Csv { path: PathBuf, detail: String },

    #[error("feature {feature} is constant; cannot standardise")]
    ConstantFeature { feature: usize },

    #[error("model dump: {0}")]
    Dump(String),

    #[error("training iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Strips any iteration context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    /// Whether the error stems from configuration rather than numerics or IO.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_) | Error::MissingColumn { .. } | Error::Parse { .. } | Error::Csv { .. } | Error::Io { .. }
        )
    }
}
