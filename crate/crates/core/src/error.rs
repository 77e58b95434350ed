use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or flag combination.
    #[error("config error: {0}")]
    Config(String),
    /// Tensor shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed or inconsistent on-disk data.
    #[error("format error: {0}")]
    Format(String),
    /// NaN/Inf encountered during training or optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
