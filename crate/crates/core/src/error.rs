use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GepError>;

#[derive(Debug, Error)]
pub enum GepError {
    #[error("event ({x}, {y}) lies outside the {width}x{height} sensor")]
    CoordinateRange {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular input: {0}")]
    Singularity(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("capacity exceeded: {len} tokens for a table of {capacity}")]
    Capacity { len: usize, capacity: usize },
    #[error("unpaired streams: {events} event steps vs {images} image steps")]
    Pairing { events: usize, images: usize },
    #[error("out of range: {0}")]
    Range(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("label {label} is not a valid class id for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` requires `{missing}`; run the `{prerequisite}` stage first")]
    StageOrder {
        stage: String,
        prerequisite: String,
        missing: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GepError {
    /// Process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            GepError::Config(_) | GepError::Parameter(_) => 2,
            GepError::Io(_) => 3,
            GepError::Format(_) | GepError::CoordinateRange { .. } => 4,
            GepError::StageOrder { .. } => 5,
            GepError::Divergence { .. } => 6,
            GepError::Shape(_)
            | GepError::Capacity { .. }
            | GepError::Pairing { .. }
            | GepError::Range(_)
            | GepError::InvalidLabel { .. } => 7,
            GepError::Singularity(_) | GepError::Domain(_) | GepError::Contract(_) => 8,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GepError::Shape(msg.into()))
}
