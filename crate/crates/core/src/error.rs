//! Crate-wide error type.

/// Error type shared by every module in the crate.
///
/// The variants are grouped by failure class so that callers (most notably
/// the CLI) can map them onto distinct exit codes: I/O problems, bad inputs
/// or configuration, iterative-solver failures, and numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match the expected on-disk layout.
    #[error("invalid file format: {0}")]
    Format(String),

    /// Two objects that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A precondition on an argument or configuration was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A numerical failure: divergence, non-finite values, or an
    /// infeasible randomized search.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
