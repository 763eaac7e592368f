use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("function is not decreasing on the sampled grid near x = {0}")]
    NotDecreasing(f64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LabError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(LabError::Domain(format!("{name} = {p} must lie in [0, 1]")));
    }
    Ok(())
}
