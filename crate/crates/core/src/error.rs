use thiserror::Error;

/// Errors produced by the training, search and analysis routines.
#[derive(Debug, Error)]
pub enum QgsError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Step size fell below the configured minimum.
    #[error("step size underflow at t = {t:e} (h = {step:e}, f = {f_value:e}, |grad|_inf = {grad_norm:e})")]
    Stiffness {
        t: f64,
        step: f64,
        f_value: f64,
        grad_norm: f64,
        x: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch} (f = {value:e})")]
    Divergence { epoch: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QgsError>;
