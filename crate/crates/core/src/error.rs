use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the training, freezing and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate batch: {0} elements per channel, need at least 2")]
    DegenerateBatch(usize),

    #[error("backward called without a matching forward pass in layer {0}")]
    StaleCache(&'static str),

    #[error("epoch {epoch} outside schedule range 0..={max}")]
    OutOfRange { epoch: usize, max: usize },

    #[error("operation {op} not valid for weight mode {mode}")]
    WrongMode { op: &'static str, mode: &'static str },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("alpha must be positive, channel {channel} has {value}")]
    NonPositiveAlpha { channel: usize, value: f64 },

    #[error("layer {index} cannot be folded: {reason}")]
    UnfoldableLayer { index: usize, reason: String },

    #[error("packed length mismatch: {0}")]
    LengthMismatch(String),

    #[error("channel mismatch: feature map has {got} channels, thresholds have {expected}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::StaleCache(_) => "stale_cache",
            Error::OutOfRange { .. } => "out_of_range",
            Error::WrongMode { .. } => "wrong_mode",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NonPositiveAlpha { .. } => "non_positive_alpha",
            Error::UnfoldableLayer { .. } => "unfoldable_layer",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::ChannelMismatch { .. } => "channel_mismatch",
            Error::Format { .. } => "format_error",
            Error::Checksum { .. } => "checksum_error",
            Error::InvalidModel(_) => "invalid_model",
            Error::Config(_) => "config_error",
            Error::Io(_) => "io_error",
            Error::Json(_) => "checkpoint_error",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
