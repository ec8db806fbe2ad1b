use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema violation at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Validation failures (bad input data or config) as opposed to I/O trouble.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        match self {
            Error::Parse { message, .. } => Error::Parse { line, message },
            Error::Schema { message, .. } => Error::Schema { line, message },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
