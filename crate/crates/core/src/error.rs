use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Every variant maps to a short machine-readable code (see [`Error::code`])
/// that the command-line harness prints as a prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid quantum object: {0}")]
    InvalidState(String),

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("zero-probability observation (normaliser {0:e} below tolerance)")]
    ZeroProbability(f64),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("gram matrix is not positive semidefinite: {0}")]
    NotPsdGram(String),

    #[error("median bandwidth is zero; supply a bandwidth explicitly")]
    DegenerateBandwidth,

    #[error("sequence of length {len} is too short (need more than {needed})")]
    SequenceTooShort { len: usize, needed: usize },

    #[error("refinement diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable error code used by the CLI (`error[E_CODE]: ...`).
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "E_DIM",
            Error::InvalidInput(_) => "E_INPUT",
            Error::InvalidState(_) => "E_STATE",
            Error::DegenerateState(_) => "E_DEGENERATE",
            Error::ZeroProbability(_) => "E_ZERO_PROB",
            Error::Singular(_) => "E_SINGULAR",
            Error::NotPsdGram(_) => "E_GRAM",
            Error::DegenerateBandwidth => "E_BANDWIDTH",
            Error::SequenceTooShort { .. } => "E_SHORT",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Config { .. } => "E_CONFIG",
            Error::Parse { .. } => "E_PARSE",
            Error::ModelFormat(_) => "E_MODEL",
            Error::Io(_) => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
