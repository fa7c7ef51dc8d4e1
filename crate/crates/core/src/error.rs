use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("point lies behind camera {0}")]
    Cheirality(usize),
    #[error("empty map: {0}")]
    EmptyMap(String),
    #[error("not enough correspondences: need {needed}, got {got}")]
    NotEnoughMatches { needed: usize, got: usize },
    #[error("robust estimation failed: {0}")]
    RansacFailed(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
