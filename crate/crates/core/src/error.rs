use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward called on a trace that was already consumed")]
    TraceConsumed,

    #[error("loss passed to backward is not a scalar (numel {0})")]
    NonScalarLoss(usize),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid graph at node {node}: {reason}")]
    InvalidGraph { node: String, reason: String },

    #[error("graph contains a cycle")]
    CyclicGraph,

    #[error("pruning would remove every channel of layer {0}")]
    EmptyLayer(String),

    #[error("selection covers only part of a coupled channel group (layer {layer}, channel {channel})")]
    PartialGroup { layer: String, channel: usize },

    #[error("mask for {layer} has length {found}, layer has {expected} channels")]
    MaskLength {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("model file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("model file: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("model file: {0}")]
    Format(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("evaluation produced NaN at {0}")]
    NanMetric(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected,
            found,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::TraceConsumed => "trace_consumed",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::MissingGradient(_) => "missing_gradient",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidGraph { .. } => "invalid_graph",
            Error::CyclicGraph => "cyclic_graph",
            Error::EmptyLayer(_) => "empty_layer",
            Error::PartialGroup { .. } => "partial_group",
            Error::MaskLength { .. } => "mask_length",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::NanMetric(_) => "nan_metric",
        }
    }
}
