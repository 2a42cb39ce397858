// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
///
/// [`Error::kind`] gives a stable machine-readable tag, used by the CLI's
/// error JSON.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity reached a routine that requires finite input.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A matrix row (direction) had near-zero norm.
    #[error("degenerate direction at row {row}")]
    DegenerateDirection {
        /// Offending row index.
        row: usize,
    },

    /// A computed vector collapsed to (near) zero norm.
    #[error("degenerate result: {0}")]
    Degenerate(String),

    /// A basis could not be fitted at the requested rank.
    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// Too few rows to estimate a mean difference.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// A value bucket had no support inside a context.
    #[error("missing value bucket v={value} in context c={context}")]
    MissingBucket {
        /// Context label.
        context: i64,
        /// Value label.
        value: i64,
    },

    /// A layer, position, token or value fell outside its valid range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        /// Optimizer step at which the loss went non-finite.
        step: usize,
        /// The offending loss value.
        loss: f32,
    },

    /// Text could not be tokenized.
    #[error("tokenizer: {0}")]
    Tokenizer(String),

    /// A binary container failed validation.
    #[error("container: {0}")]
    Container(String),

    /// The model bridge misbehaved or reported an error.
    #[error("bridge: {0}")]
    Bridge(String),

    /// A run configuration is invalid.
    #[error("config: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateDirection { .. } => "degenerate_direction",
            Error::Degenerate(_) => "degenerate",
            Error::RankDeficient(_) => "rank_deficient",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::MissingBucket { .. } => "missing_bucket",
            Error::OutOfRange(_) => "out_of_range",
            Error::Divergence { .. } => "divergence",
            Error::Tokenizer(_) => "tokenizer",
            Error::Container(_) => "container",
            Error::Bridge(_) => "bridge",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
