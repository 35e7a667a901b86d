use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate solve: {0}")]
    DegenerateSolve(String),

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    /// Malformed persisted data. `location` is a byte offset or a JSON path.
    #[error("malformed data at {location}: {reason}")]
    Data { location: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn data(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            location: location.into(),
            reason: reason.into(),
        }
    }

    /// Errors caused by bad persisted or user-provided data, as opposed to
    /// programming or configuration mistakes.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::RejectedInput(format!("{what} contains non-finite values")))
    }
}
