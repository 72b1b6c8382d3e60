use thiserror::Error;

pub type Result<T, E = SvrbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SvrbError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The diffusion coefficient dropped to or below the coercivity floor at some quadrature point.
    #[error("coercivity lost: min a(theta, x) = {min_value:.3e} <= floor {floor:.1e}")]
    CoercivityLost { min_value: f64, floor: f64 },

    #[error("high-fidelity solve failed: relative residual {residual:.3e} > {tolerance:.1e}")]
    SolveFailed { residual: f64, tolerance: f64 },

    #[error("reduced solve failed: {0}")]
    RbSolveFailed(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("backend failure at current particle {index}: {source}")]
    Backend {
        index: usize,
        #[source]
        source: Box<SvrbError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SvrbError {
    /// Errors caused by user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SvrbError::Config(_) | SvrbError::Unsupported(_) | SvrbError::Json(_)
        )
    }
}
