use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("normalization stats mismatch: latent has {found:?}, codec expects {expected:?}")]
    StatsMismatch { expected: String, found: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("sample rate mismatch: expected {expected} Hz, got {found} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("too many motion frames: {found} > {max}")]
    TooManyMotionFrames { found: usize, max: usize },
    #[error("non-finite activation in block {block}: {what}")]
    NonFiniteActivation { block: usize, what: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("sampler diverged at step {0}")]
    SamplerDiverged(usize),
    #[error("missing required signal: {0}")]
    MissingSignal(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("clip {clip}: {source}")]
    Clip {
        clip: String,
        #[source]
        source: Box<Error>,
    },
    #[error("segment {index}: {source}")]
    Segment {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_clip(self, clip: impl Into<String>) -> Self {
        Error::Clip {
            clip: clip.into(),
            source: Box::new(self),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
