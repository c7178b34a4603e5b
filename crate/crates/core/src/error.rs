use thiserror::Error;

pub type Result<T> = std::result::Result<T, PsdpError>;

/// Everything that can go wrong between parsing an instance and emitting a
/// certificate.
#[derive(Debug, Error)]
pub enum PsdpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("symmetric eigensolver did not converge on a {dim}x{dim} matrix")]
    EigenFailure { dim: usize },

    #[error("matrix is not positive semidefinite (lambda_min = {min_eigenvalue:e}, allowed >= {threshold:e})")]
    NotPsd { min_eigenvalue: f64, threshold: f64 },

    #[error("objective matrix is singular (lambda_min = {min_eigenvalue:e}, lambda_max = {max_eigenvalue:e})")]
    SingularObjective { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("constraint {index} has non-positive trace after normalization")]
    ZeroConstraint { index: usize },

    #[error("spectral norm of the exponent ({estimate:e}) exceeds the declared bound {bound:e}")]
    KappaExceeded { estimate: f64, bound: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("decision procedure exceeded {limit} iterations")]
    MaxItersExceeded { limit: usize },

    #[error("empty search bracket [{lo}, {hi}]")]
    EmptyBracket { lo: f64, hi: f64 },

    #[error("gain {step} violates the MMWU hypothesis: {reason}")]
    HypothesisViolated { step: usize, reason: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("certificate mismatch: {0}")]
    CertificateMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for PsdpError {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            return PsdpError::Io(err.into());
        }
        let line = err.line();
        let column = err.column();
        // serde_json appends " at line L column C" to custom messages.
        let full = err.to_string();
        let message = match full.rfind(" at line ") {
            Some(pos) => full[..pos].to_string(),
            None => full,
        };
        PsdpError::Parse {
            line,
            column,
            message,
        }
    }
}
