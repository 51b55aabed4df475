use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read audio file {path}: {reason}")]
    UnreadableAudio { path: PathBuf, reason: String },

    #[error("unsupported channel count {channels} in {path} (mono required)")]
    UnsupportedChannels { path: PathBuf, channels: u16 },

    #[error("resampling failed: {0}")]
    Resample(String),

    #[error("input too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("missing audio for utterance {utterance_id}: {path}")]
    MissingAudio { utterance_id: String, path: PathBuf },

    #[error("text is empty after normalization: {0:?}")]
    EmptyText(String),

    #[error("unknown symbol {symbol:?} (not in vocabulary)")]
    UnknownSymbol { symbol: String },

    #[error("token id {id} out of vocabulary range (size {vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("corpus of {available} entries is too small for val={val} test={test} (need a non-empty train split)")]
    SplitTooSmall {
        available: usize,
        val: usize,
        test: usize,
    },

    #[error("length mismatch for {utterance_id}: expected {expected}, got {actual}")]
    LengthMismatch {
        utterance_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("all durations are zero; alignment is degenerate")]
    DegenerateDurations,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("signal is silent; metric is undefined")]
    SilentSignal,

    #[error("no frames are voiced in both signals")]
    NoCoVoicedFrames,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (batch {utterance_ids:?}): {reason}")]
    Diverged {
        step: u64,
        utterance_ids: Vec<String>,
        reason: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
