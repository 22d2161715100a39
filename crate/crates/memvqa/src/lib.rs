//! Memory-augmented co-attention model for visual question answering.
//!
//! The crate is organized bottom-up:
//!
//! * [`numeric`] holds dense tensors and a tape-based reverse-mode
//!   differentiation graph built from a small fixed set of primitives.
//! * [`encoders`] turns question text into a token matrix via a bidirectional
//!   LSTM and loads region feature grids from disk.
//! * [`coattention`] computes sequential attention over regions and words.
//! * [`mann`] maintains an external memory with least-used slot writing.
//! * [`head`] maps the memory output to an answer distribution.
//! * [`data`] covers dataset parsing, answer vocabularies, the accuracy
//!   metric, and a synthetic heavy-tailed task generator.
//! * [`model`] wires the pieces into a single forward builder.
//! * [`training`] implements the optimizer, the streaming train loop,
//!   evaluation, checkpoints, and the memory ablation harness.
//!
//! Everything is deterministic given a seed: random state comes from
//! explicitly seeded ChaCha8 generators, map iteration uses ordered maps,
//! and no output file embeds a timestamp.

pub mod coattention;
pub mod data;
pub mod encoders;
pub mod head;
pub mod mann;
pub mod model;
pub mod numeric;
pub mod training;

use std::path::PathBuf;

/// What went wrong while loading a feature grid file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadErrorKind {
    /// The JSON header line is missing or does not parse.
    MalformedHeader,
    /// The payload holds fewer bytes than the header promises.
    TruncatedPayload,
    /// The payload holds more bytes than the header promises.
    TrailingData,
    /// The payload decodes to NaN or infinite values.
    NonFinite,
}

impl std::fmt::Display for LoadErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LoadErrorKind::MalformedHeader => "malformed header",
            LoadErrorKind::TruncatedPayload => "truncated payload",
            LoadErrorKind::TrailingData => "trailing data after payload",
            LoadErrorKind::NonFinite => "non-finite values in payload",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to load {path}: {kind}")]
    Load { path: PathBuf, kind: LoadErrorKind },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing feature grid for image id {image_id}")]
    MissingFeatures { image_id: String },

    #[error("non-finite loss {value} at epoch {epoch} step {step} (question id {question_id})")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        question_id: u64,
        value: f64,
    },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("answer vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attaches a human-readable context string to an I/O failure.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Attaches a human-readable context string to a JSON failure.
    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
