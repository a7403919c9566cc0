//! Crate-wide error type.
//!
//! Every public operation returns [`Result`]. Variants carry enough context
//! to name the offending sample, layer, or path; [`Error::category`] groups
//! them for process exit codes (config = 2, data = 3, model = 4).

use thiserror::Error;

/// Coarse error grouping used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or arguments (exit code 2).
    Config,
    /// Malformed or inconsistent data: corpora, run files, shapes (exit code 3).
    Data,
    /// Model/adapter problems: invalid masks, dimension mismatches, context
    /// overflow (exit code 4).
    Model,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed run file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("dimension mismatch for sample '{sample_id}': {detail}")]
    Dimension { sample_id: String, detail: String },

    #[error("layer {layer} out of range [1, {num_layers}]")]
    LayerRange { layer: usize, num_layers: usize },

    #[error("capture kind '{kind}' not present in this run (have: {available})")]
    UnknownKind { kind: String, available: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("zero vector encountered: {0}")]
    ZeroVector(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask entry (layer {layer}, neuron {index}) out of range: {detail}")]
    MaskOutOfRange {
        layer: usize,
        index: usize,
        detail: String,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("context length exceeded: need {needed} tokens but the model limit is {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("split hygiene violation: {0}")]
    SplitHygiene(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorCategory::Config,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Corpus(_)
            | Error::EmptyInput(_)
            | Error::ZeroVector(_)
            | Error::Shape(_)
            | Error::LayerRange { .. }
            | Error::UnknownKind { .. }
            | Error::SplitHygiene(_)
            | Error::Stats(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::Dimension { .. }
            | Error::MaskOutOfRange { .. }
            | Error::Model(_)
            | Error::ContextOverflow { .. } => ErrorCategory::Model,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
