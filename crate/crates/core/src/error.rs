use std::path::PathBuf;

/// Errors raised anywhere in the pretraining stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("query and key views disagree on horizontal flip")]
    FlipMismatch,
    #[error("invalid region ({t}, {l}, {b}, {r}): needs finite coordinates with b > t and r > l")]
    InvalidRegion { t: f64, l: f64, b: f64, r: f64 },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("batch norm needs at least 2 elements per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("vector norm below 1e-12 in l2_normalize")]
    DegenerateNorm,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("region has non-positive area")]
    EmptyRegion,
    #[error("pooling kernel {kernel} exceeds feature map {h}x{w}")]
    KernelTooLarge { kernel: usize, h: usize, w: usize },
    #[error("operation requires the {0} variant")]
    VariantMismatch(&'static str),
    #[error("region loss called with no region pairs")]
    EmptyPairs,
    #[error("feature vector is not unit norm (norm {0})")]
    NonUnitNorm(f64),
    #[error("random resized crop failed: {0}")]
    DegenerateCrop(String),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image format error: {0}")]
    Image(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier, used for machine-readable CLI output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FlipMismatch => "flip_mismatch",
            Error::InvalidRegion { .. } => "invalid_region",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::DegenerateNorm => "degenerate_norm",
            Error::NonFinite(_) => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::GraphConsumed => "graph_consumed",
            Error::EmptyRegion => "empty_region",
            Error::KernelTooLarge { .. } => "kernel_too_large",
            Error::VariantMismatch(_) => "variant_mismatch",
            Error::EmptyPairs => "empty_pairs",
            Error::NonUnitNorm(_) => "non_unit_norm",
            Error::DegenerateCrop(_) => "degenerate_crop",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
