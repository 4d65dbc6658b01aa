use thiserror::Error;

/// Errors produced anywhere in the head, its numeric substrate, or the data harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or axes. Never silently broadcast.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity produced or supplied at an op boundary.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A value outside an operation's numeric domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input data, e.g. non-binary labels.
    #[error("data error: {0}")]
    Data(String),

    /// Inconsistent dataset or run description.
    #[error("spec error: {0}")]
    Spec(String),

    /// Malformed binary file. `offset` is the byte where decoding failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            detail: format!("{lhs:?} vs {rhs:?}"),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
