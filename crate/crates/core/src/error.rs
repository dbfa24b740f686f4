use thiserror::Error;

/// Errors raised anywhere in the engine, models, data pipeline or trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("layer '{layer}': {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),

    #[error("checksum mismatch (stored {stored:#x}, computed {computed:#x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss '{loss}' at iteration {iteration}")]
    Diverged { iteration: u64, loss: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => true,
            Error::Layer { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
