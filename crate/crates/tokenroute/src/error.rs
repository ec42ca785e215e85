use thiserror::Error;

/// Crate-wide error type. Everything user-triggerable surfaces as one of
/// these; internal logic bugs panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An attention query row whose mask blocks every key. Softmax over an
    /// empty support has no value, so this is a hard error, never a NaN.
    #[error("attention row {row} has no allowed keys")]
    BlockedRow { row: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("episode generation failed: {0}")]
    Task(String),

    #[error("{path}: bad file format: {detail}")]
    Format { path: String, detail: String },

    /// Command-line usage problem; displays as the bare message so the CLI
    /// can promise stable one-line diagnostics.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
