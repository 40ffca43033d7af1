use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named op.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be 0-dimensional, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: loss is not recorded on this tape")]
    NotOnTape,

    /// A configuration value violates its contract. `path` is the dotted
    /// location of the offending field.
    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// A runtime precondition of an operation failed.
    #[error("{0}")]
    Invalid(String),

    #[error("checkpoint checksum mismatch: {0}")]
    Checksum(String),

    #[error("checkpoint format version {found} is not supported (expected {expected}); refusing to migrate")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint does not match model architecture: {}", .0.join("; "))]
    Mismatch(Vec<String>),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
