use thiserror::Error;

/// Errors raised by tensor, mixer and block operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PadreError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced at stage {stage}")]
    NonFinite { stage: String },

    #[error("oracle size cap exceeded: dim {dim} > cap {cap}")]
    OracleCap { dim: usize, cap: usize },

    #[error("trace does not belong to this block (stale or missing)")]
    StaleTrace,

    #[error("division by near-zero denominator {value:e} at entry ({row}, {col})")]
    Division { row: usize, col: usize, value: f64 },

    #[error("normalization error: column {column} has l1 norm {norm:e}")]
    Normalization { column: usize, norm: f64 },

    #[error("unstable rational approximation: denominator {value:e} in row {row}")]
    Instability { row: usize, value: f64 },

    #[error("equivalence check failed for {scheme}: max deviation {max_deviation:e}")]
    Equivalence { scheme: String, max_deviation: f64 },

    #[error("ill-conditioned probe system: condition number {0:e}")]
    IllConditioned(f64),

    #[error("not a polynomial of degree <= {degree}: residual {residual:e}")]
    NotPolynomial { degree: usize, residual: f64 },

    #[error("degree cap {cap} exceeded: residual {residual:e}")]
    DegreeCapExceeded { cap: usize, residual: f64 },

    #[error("container format error: {0}")]
    Format(String),

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("insufficient points for {scheme}: need at least {needed}, got {got}")]
    InsufficientPoints {
        scheme: String,
        needed: usize,
        got: usize,
    },

    #[error("missing mode `{0}`")]
    MissingMode(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = PadreError> = std::result::Result<T, E>;

impl From<std::io::Error> for PadreError {
    fn from(e: std::io::Error) -> Self {
        PadreError::Io(e.to_string())
    }
}

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl Into<String>,
    actual: impl Into<String>,
) -> PadreError {
    PadreError::Shape {
        context,
        expected: expected.into(),
        actual: actual.into(),
    }
}
