use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, schedules, models, and metrics.
#[derive(Debug)]
pub enum Error {
    /// Operand extents are incompatible for the given operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation attribute is invalid (bad group count, bad axis, ...).
    InvalidAttr { op: &'static str, detail: String },
    /// Backward was asked to differentiate a non-scalar value.
    NotScalar { numel: usize },
    /// EMA decay must lie in [0, 1].
    DecayOutOfRange { decay: f64 },
    /// Schedule construction received an invalid parameter range.
    InvalidRange { detail: String },
    /// A timestep index is outside the schedule or ordered incorrectly.
    InvalidTimestep { detail: String },
    /// Decoder pass count must satisfy 1 <= K <= T.
    InvalidK { k: usize, t: usize },
    /// A sampler plan is inconsistent with the model or schedule.
    InvalidPlan { detail: String },
    /// DDIM step count must satisfy 1 <= steps <= T.
    InvalidSteps { steps: usize, t: usize },
    /// Vectors have different dimensionality.
    DimMismatch { left: usize, right: usize },
    /// An encoder cache is inconsistent with the decoding parameters.
    CacheMismatch { detail: String },
    /// A LoRA target name does not exist in the base parameter set.
    TargetMissing { name: String },
    /// The toy dataset generator received zero samples to produce.
    EmptyDataset,
    /// The toy data spec cannot render shapes fully inside the canvas.
    InvalidSpec { detail: String },
    /// Unknown shape/color class id.
    UnknownClass { shape_id: usize, color_id: usize },
    /// k must be smaller than both feature set sizes.
    KTooLarge { k: usize, n: usize },
    /// Too few rows for a full-rank covariance estimate.
    RankDeficient { n: usize, d: usize },
    /// A computation produced or received non-finite values.
    NonFinite { context: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed file contents (PPM, manifest, ...).
    Parse { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidAttr { op, detail } => write!(f, "{op}: invalid attribute: {detail}"),
            Error::NotScalar { numel } => {
                write!(f, "backward target must be a scalar, got {numel} elements")
            }
            Error::DecayOutOfRange { decay } => {
                write!(f, "EMA decay must be in [0, 1], got {decay}")
            }
            Error::InvalidRange { detail } => write!(f, "invalid schedule range: {detail}"),
            Error::InvalidTimestep { detail } => write!(f, "invalid timestep: {detail}"),
            Error::InvalidK { k, t } => write!(f, "K must satisfy 1 <= K <= T; got K={k}, T={t}"),
            Error::InvalidPlan { detail } => write!(f, "invalid sampler plan: {detail}"),
            Error::InvalidSteps { steps, t } => {
                write!(f, "steps must satisfy 1 <= steps <= T; got steps={steps}, T={t}")
            }
            Error::DimMismatch { left, right } => {
                write!(f, "dimension mismatch: {left} vs {right}")
            }
            Error::CacheMismatch { detail } => write!(f, "encoder cache mismatch: {detail}"),
            Error::TargetMissing { name } => write!(f, "LoRA target not found: {name}"),
            Error::EmptyDataset => write!(f, "dataset must contain at least one sample"),
            Error::InvalidSpec { detail } => write!(f, "invalid toy data spec: {detail}"),
            Error::UnknownClass { shape_id, color_id } => {
                write!(f, "unknown class: shape {shape_id}, color {color_id}")
            }
            Error::KTooLarge { k, n } => {
                write!(f, "k = {k} too large for a feature set of {n} rows")
            }
            Error::RankDeficient { n, d } => {
                write!(f, "need at least d+1 = {} rows for dimension {d}, got {n}", d + 1)
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Parse { detail } => write!(f, "parse error: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
