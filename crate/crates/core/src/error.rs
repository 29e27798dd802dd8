use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step index {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("dimensions {height}x{width} not divisible by {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset needs at least two classes, found {0}")]
    SingleClass(usize),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("unknown layer identifier `{0}`")]
    UnknownLayer(String),

    #[error("rank {rank} exceeds min(fan_in, fan_out) = {limit} for layer `{layer}`")]
    RankTooLarge {
        layer: String,
        rank: usize,
        limit: usize,
    },

    #[error("missing {0}")]
    Missing(String),

    #[error("wrong role: expected {expected}, found {found}")]
    Role { expected: String, found: String },

    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
