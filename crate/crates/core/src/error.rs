//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by estimation, model fitting and data ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix factorization failed after ridge escalation: {0}")]
    SingularMatrix(String),

    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("degenerate mixture component {component}: responsibility mass {mass:.3e}")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("all mixture components underflowed for row {row}")]
    UnderflowRow { row: usize },

    #[error("objective diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("csv parse error at row {row}, column {col}: {message}")]
    CsvCell {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics themselves, as opposed to bad
    /// input or I/O. The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix(_)
                | Error::EigenFailure(_)
                | Error::DegenerateComponent { .. }
                | Error::UnderflowRow { .. }
                | Error::Diverged { .. }
                | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
