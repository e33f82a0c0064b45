//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors surfaced by construction, validation and solver entry points.
///
/// Numerical degradations that do not invalidate a run (ridge fallbacks,
/// window extrapolation, aborted paths) are reported through flags on the
/// result types instead of errors.
#[derive(Error, Debug)]
pub enum CoreError {
    /// A generator matrix violates its structural invariants.
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    /// Array or model dimensions are inconsistent.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument is outside its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A model is structurally inconsistent with the requested operation
    /// (e.g. a jump sensitivity against a regime that cannot be reached).
    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    /// An explicit scheme was asked to run outside its stability region.
    #[error("stability violated: {0}")]
    Stability(String),

    /// A numerical routine failed irrecoverably.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Writing an export target failed.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
