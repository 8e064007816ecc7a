use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Newton iteration did not converge in {context} (residual {residual:.3e} after {iterations} iterations)")]
    NewtonFailed {
        context: String,
        residual: f64,
        iterations: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible dispatch problem: {0}")]
    Infeasible(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state matrix is not Hurwitz (max real eigenvalue {max_real:.3e})")]
    NotHurwitz { max_real: f64 },

    #[error("degenerate Rosenbrock pencil: {0}")]
    DegeneratePencil(String),

    #[error("network validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("scenario schema errors: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<SchemaError>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that stem from invalid input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Schema(_) | Error::InvalidParameter(_) | Error::Json(_)
        )
    }
}

/// A schema violation with the JSON pointer of the offending value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub pointer: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        SchemaError {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let at = if self.pointer.is_empty() {
            "/"
        } else {
            &self.pointer
        };
        write!(f, "{}: {}", at, self.message)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
