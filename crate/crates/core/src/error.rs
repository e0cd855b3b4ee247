//! Error taxonomy shared by every module.
//!
//! Variants map one-to-one onto the failure classes surfaced at the public
//! API: shape mismatches, domain violations (e.g. spectral metrics of a zero
//! matrix), ill-conditioned linear algebra, rank preconditions, empty
//! adapters after pruning, manifold feasibility, and configuration problems.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix/tensor dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Gram or similar matrix too ill-conditioned to invert or root.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    /// A rank precondition was violated.
    #[error("rank error: {0}")]
    Rank(String),

    /// Pruning removed every component of an adapter.
    #[error("empty adapter: {0}")]
    EmptyAdapter(String),

    /// Manifold iterate left the feasible region.
    #[error("feasibility error: {0}")]
    Feasibility(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: configuration problems exit 2,
    /// everything else exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
