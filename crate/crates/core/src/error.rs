use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum HmlError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },
    #[error("training diverged at t = {t} (eps_g = {eps})")]
    Divergence { t: f64, eps: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HmlError {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HmlError::DegenerateCovariance(_)
                | HmlError::Quadrature(_)
                | HmlError::Integration { .. }
                | HmlError::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, HmlError>;
