//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration or arguments.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A location falls outside the partitioned domain.
    #[error("location ({x}, {y}) is outside the domain")]
    OutsideDomain { x: f64, y: f64 },

    /// Cholesky factorization failed even after the jitter schedule was
    /// exhausted. Usually signals near-duplicate knots.
    #[error(
        "factorization of the level-{level} node {index} prior failed after \
         jitter escalation up to {max_jitter:e} (near-duplicate knots?)"
    )]
    Factorization {
        level: usize,
        index: usize,
        max_jitter: f64,
    },

    /// The chain reached a non-finite log-likelihood.
    #[error("non-finite log-likelihood at iteration {iteration}; state dump: {dump}")]
    Divergence { iteration: usize, dump: String },

    /// A latent-indicator configuration violates the heredity constraint.
    #[error("indicator state violates heredity at level {level}, node {index}")]
    Heredity { level: usize, index: usize },

    /// Numerical argument outside the supported domain.
    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Heredity { .. } => 2,
            Error::OutsideDomain { .. }
            | Error::Factorization { .. }
            | Error::Divergence { .. }
            | Error::Domain(_) => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
        }
    }
}
