use thiserror::Error;

/// Errors raised by the dense tensor engine and the differentiable ops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("degenerate vector in {op}: norm {norm:e} below floor")]
    DegenerateVector { op: &'static str, norm: f64 },

    #[error("{func} domain error: argument {arg}")]
    Domain { func: &'static str, arg: f64 },

    #[error("contract violated: {0}")]
    Contract(String),
}

/// Errors from reading or writing clip files and manifests.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at byte offset 0: expected \"UAAN\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("truncated {what} at byte offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid annotation JSON at byte offset {offset}: {message}")]
    Annotation { offset: usize, message: String },

    #[error("invariant violated at byte offset {offset}: {message}")]
    Invariant { offset: usize, message: String },

    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Contract violations in the data generator, training loop and metric suite.
#[derive(Debug, Error)]
pub enum UaanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = UaanError> = std::result::Result<T, E>;
