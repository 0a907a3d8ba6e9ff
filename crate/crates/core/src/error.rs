use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("operator norm did not converge after {iterations} iterations (best estimate {best_estimate})")]
    NormNotConverged { best_estimate: f64, iterations: usize },

    #[error("QP solver did not converge after {iterations} iterations (kkt residual {kkt_residual:e}, tolerance {tol:e})")]
    SolverNotConverged {
        kkt_residual: f64,
        tol: f64,
        iterations: usize,
    },

    #[error("{what}: enumeration of {count} items exceeds the cap of {cap}")]
    TooLarge {
        what: &'static str,
        count: u128,
        cap: u128,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
