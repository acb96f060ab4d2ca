use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate excitation: {0}")]
    DegenerateExcitation(String),

    #[error("matrix not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Copy of this error with the same kind and message; wrapped I/O and
    /// parser errors keep only their message.
    pub fn clone_message(&self) -> Error {
        match self {
            Error::Dimension(s) => Error::Dimension(s.clone()),
            Error::Parameter(s) => Error::Parameter(s.clone()),
            Error::DegenerateExcitation(s) => Error::DegenerateExcitation(s.clone()),
            Error::NotPositiveDefinite(s) => Error::NotPositiveDefinite(s.clone()),
            Error::Unsupported(s) => Error::Unsupported(s.clone()),
            Error::Format(s) => Error::Format(s.clone()),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), e.to_string())),
            other => Error::Format(other.to_string()),
        }
    }
}
