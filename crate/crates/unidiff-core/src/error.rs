use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A kernel produced NaN/Inf while the graph runs in checked mode.
    #[error("non-finite value produced by kernel `{kernel}`")]
    NonFinite { kernel: &'static str },

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("word not in vocabulary: `{word}`")]
    UnknownWord { word: String },

    #[error("token id {id} out of range (vocabulary size {vocab})")]
    TokenRange { id: usize, vocab: usize },

    #[error("missing gradient for parameter `{name}`")]
    MissingGrad { name: String },

    #[error("missing parameter `{name}`")]
    MissingParam { name: String },

    #[error("checkpoint corrupt: {detail}")]
    Corrupt { detail: String },

    #[error("checkpoint schema error: missing tensor `{name}`")]
    Schema { name: String },

    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("empty dataset for task `{task}`")]
    EmptyDataset { task: String },

    #[error("training aborted at step {step}: {detail}; last good checkpoint: {last_checkpoint}")]
    Aborted { step: u64, detail: String, last_checkpoint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { context, detail: detail.into() }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { key: key.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
