use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: usize,
        expected: String,
        actual: String,
    },

    #[error("stale activation trace: model changed since forward (trace v{trace}, model v{model})")]
    StaleTrace { trace: u64, model: u64 },

    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("no cached gate values; run forward first")]
    MissingCache,

    #[error("bad magic: {0:02x?}")]
    BadMagic(Vec<u8>),

    #[error("truncated IDX payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("digest mismatch for {file}: expected {expected}, got {actual}")]
    DigestMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
