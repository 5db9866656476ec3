use thiserror::Error;

#[derive(Debug, Error)]
pub enum DarcError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// The simplex projection received a vector with no positive entry.
    #[error("simplex projection undefined: no positive entry in {0:?}")]
    ProjectionUndefined(Vec<f64>),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("corrupted file: {0}")]
    Corruption(String),

    #[error("unsupported format: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DarcError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DarcError::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DarcError::Config(msg.into()))
}
