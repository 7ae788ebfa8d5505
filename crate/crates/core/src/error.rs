use thiserror::Error;

/// Errors produced anywhere in the inference stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter value violates one of its constraints.
    #[error("constraint violated for `{field}`: {reason}")]
    Constraint { field: String, reason: String },

    /// A vector or matrix did not have the expected length.
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },

    /// Arguments outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller-side precondition failed.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// The ODE produced a non-finite state.
    #[error("non-finite ODE state at day {day}: {state}")]
    Numerical { day: usize, state: String },

    /// Every particle carried zero weight at step `t`.
    #[error("particle degeneracy at t = {t}: all weights are zero")]
    Degeneracy { t: usize },

    /// Two series that must be aligned on the same window are not.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Input data failed validation.
    #[error("{file}: row {row}, column `{column}`: {reason}")]
    Schema {
        file: String,
        row: usize,
        column: String,
        reason: String,
    },

    /// The daily index has a hole.
    #[error("{file}: missing day {date}")]
    Gap { file: String, date: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn constraint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Constraint {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Degeneracy { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
