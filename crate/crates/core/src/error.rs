use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("point lies outside the trapping ball: |v| = {norm:.6e} > R = {radius:.6e}")]
    OutOfBall { norm: f64, radius: f64 },

    #[error("Taylor step t = {t:.6e} exceeds the convergence radius 1/C_der = {limit:.6e}")]
    StepTooLarge { t: f64, limit: f64 },

    #[error("backward flow t = {t:.6e} exceeds the invertibility horizon {limit:.6e}")]
    NotInvertibleThisFar { t: f64, limit: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("grid too small: boundary cells hold {boundary_mass:.3e} of the posterior mass")]
    GridTooSmall { boundary_mass: f64 },

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("initialization failure: {0}")]
    InitializationFailure(String),

    #[error("dense Gaussian approximation unsupported above d = {cap} (requested d = {dim})")]
    MatrixFreeUnsupported { dim: usize, cap: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
