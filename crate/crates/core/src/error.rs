use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// Rates too close together for the distinct-rate closed forms.
    #[error("ill-conditioned input: {0}")]
    IllConditioned(String),

    /// Vector or matrix shapes do not agree.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A method was requested for an input it does not cover.
    #[error("method not applicable: {0}")]
    NotApplicable(String),

    /// The recursion could not reduce the system to closed-form leaves.
    #[error("not computable exactly: {0}")]
    NotComputable(String),

    /// Per-receiver estimates bound the outage from opposite sides.
    #[error("cannot combine lower and upper bounds into one network estimate")]
    MixedBounds,

    /// A node processor ran a round without the neighbor reports it needs.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An iterative solver stopped before certifying its result.
    #[error("did not converge: {0}")]
    NotConverged(String),

    /// Malformed network or rates file.
    #[error("invalid file: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
