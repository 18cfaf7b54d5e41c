//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the algebra, the engines, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible dimensions.
    #[error("dimension mismatch: {left} vs {right} in {context}")]
    DimensionMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    /// A matrix that must be positive definite failed its Cholesky factorization.
    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: String },

    /// A matrix violated the symmetry invariant beyond tolerance.
    #[error("matrix is not symmetric (max relative asymmetry {max_rel:.3e})")]
    NotSymmetric { max_rel: f64 },

    /// Weighted draws cannot produce a usable covariance.
    #[error("degenerate draws: {0}")]
    DegenerateDraws(String),

    /// Configuration outside its documented ranges.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Marginal likelihood requested before all site normalizers exist.
    #[error("missing site normalizers: {missing} of {total} sites have no log Z_k")]
    MissingNormalizers { missing: usize, total: usize },

    /// Newton mode search did not converge.
    #[error("mode search failed: {0}")]
    ModeSearchFailed(String),

    /// The Metropolis chain reached a non-finite log density.
    #[error("chain diverged: {0}")]
    ChainDiverged(String),

    /// Importance weights sum to zero.
    #[error("all importance weights are zero")]
    AllZeroWeights,

    /// Quadrature produced a nonpositive tilted normalizer.
    #[error("nonpositive tilted normalizer (log Z = {log_z})")]
    NonpositiveNormalizer { log_z: f64 },

    /// Data partition does not cover the groups or splits a group.
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A structured text file failed to parse; names the offending line.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
