use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("embedding {index} has norm {norm:e}, below the 1e-12 floor")]
    ZeroVector { index: usize, norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for {what} with {limit} classes")]
    LabelOutOfRange {
        what: &'static str,
        label: usize,
        limit: usize,
    },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("batch has {views} views; at least 4 are required")]
    BatchTooSmall { views: usize },
    #[error("view {view} has no sibling view from the same origin")]
    MissingSibling { view: usize },
    #[error("anchor {anchor} has an unknown sensitive label")]
    UnknownSensitiveLabel { anchor: usize },
    #[error("anchor {anchor} has an empty negative set")]
    EmptyNegativeSet { anchor: usize },
    #[error("at least two sensitive groups are required")]
    SingleGroup,
    #[error("no (class, group pair) combination has support in every group")]
    NoSupport,
    #[error("group (y={y}, s={s}) has fewer than two members")]
    EmptyGroup { y: usize, s: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("dimension {dim} too small; need at least {required}")]
    DimensionTooSmall { dim: usize, required: usize },
    #[error("positive-set sizes differ across anchors ({min} vs {max}); every anchor needs the same number of positives")]
    AxiomViolation { min: usize, max: usize },
    #[error("bias ratio r={r} is below m^2={m_squared}")]
    AssumptionViolated { r: f64, m_squared: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}
