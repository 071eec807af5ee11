//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building or running an experiment.
#[derive(Debug, Error)]
pub enum Error {
    /// A time or spatial grid failed validation.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A measure failed validation (weights, atom counts, dimensions).
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    /// Two objects that must share a dimension do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation only implemented for scalar state space was called with d > 1.
    #[error("{0} requires state dimension d = 1")]
    ScalarOnly(&'static str),

    /// A coefficient or state became non-finite during a simulation.
    /// `source_kind` names the evaluation that produced the bad value.
    #[error(
        "non-finite {source_kind} at step {step} (t = {t:.6}), particle {particle}; aborting"
    )]
    NonFinite {
        source_kind: &'static str,
        step: usize,
        t: f64,
        particle: usize,
    },

    /// The grid solver clipped more mass in one step than the budget allows.
    #[error("clipped mass {clipped:.3e} at step {step} exceeds per-step budget {budget:.1e}")]
    ExcessiveClipping {
        step: usize,
        clipped: f64,
        budget: f64,
    },

    /// Two objects that must come from the same scenario do not.
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    /// A matrix that must be symmetric is not, beyond tolerance.
    #[error("matrix not symmetric: defect {defect:.3e} exceeds tolerance {tol:.1e}")]
    NotSymmetric { defect: f64, tol: f64 },

    /// An input collection that must be non-empty is empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A scalar or structural parameter is out of range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Underlying I/O failure while persisting or loading artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted artifact could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A persisted artifact is internally inconsistent (truncated, bad checksum).
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
}

impl Error {
    /// Shorthand used by constructors validating scalar parameters.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
