use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants double as the process exit-code classes of the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error class: 2 usage/config, 3 data, 4 numerical/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Dimension(_) => 2,
            Error::Ingest(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) | Error::Training(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
