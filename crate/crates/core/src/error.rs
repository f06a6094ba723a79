use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("ray does not produce any sample inside the volume")]
    EmptyPath,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("coordinate {0:?} outside the unit cube")]
    CoordinateOutOfRange(Vec<f64>),

    #[error("non-finite value in {group}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite {
        group: String,
        iteration: Option<usize>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Attaches an iteration number to a non-finite error; other errors pass through.
    pub fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::NonFinite { group, .. } => Error::NonFinite {
                group,
                iteration: Some(iter),
            },
            other => other,
        }
    }
}
