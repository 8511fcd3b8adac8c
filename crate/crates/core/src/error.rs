use thiserror::Error;

/// Errors raised across the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied settings (grids, counts, domains).
    #[error("configuration error: {0}")]
    Config(String),

    /// A state or coefficient left its admissible range (non-finite state, σ² ≤ 0).
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    /// A linear solve or factorization broke down.
    #[error("solver error: {0}")]
    Solver(String),

    /// Inputs whose shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn dimension<S: Into<String>>(msg: S) -> Error {
    Error::Dimension(msg.into())
}
