use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("array data contains a non-finite entry at flat index {index}")]
    NonFiniteData { index: usize },

    #[error("array shape {shape:?} does not match data length {len}")]
    BadArrayShape { shape: Vec<usize>, len: usize },

    #[error("gradient root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),

    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),

    #[error("degenerate signal: standard deviation below 1e-12")]
    DegenerateSignal,

    #[error("signal too short: need at least {min} samples, got {len}")]
    SignalTooShort { len: usize, min: usize },

    #[error("degenerate subject profile: {0}")]
    DegenerateProfile(String),

    #[error("segment length {len} is not divisible by patch size {patch}")]
    IndivisibleLength { len: usize, patch: usize },

    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),

    #[error("too few subjects ({subjects}) for a non-empty {split} split")]
    TooFewSubjects { subjects: usize, split: &'static str },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("mask ratio {0} outside the allowed range")]
    InvalidRatio(f64),

    #[error("mask plan leaves an empty {0} index set")]
    EmptyMask(&'static str),

    #[error("mask plan does not match the data: {0}")]
    PlanMismatch(String),

    #[error("batch needs at least 2 samples for contrastive negatives, got {0}")]
    BatchTooSmall(usize),

    #[error("loss weight lambda must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),

    #[error("labels contain a single class; classification needs at least two")]
    SingleClass,

    #[error("metric needs both classes present in the labels")]
    OneClassPresent,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },

    #[error("parameter `{0}` missing")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True when the error stems from user-supplied input or configuration
    /// rather than an internal failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidFractions(_)
                | Error::TooFewSubjects { .. }
                | Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::TruncatedFile(_)
                | Error::Malformed(_)
                | Error::InvalidRatio(_)
                | Error::BatchTooSmall(_)
                | Error::NegativeLambda(_)
                | Error::InvalidTemperature(_)
                | Error::ModalityMismatch(_)
                | Error::SingleClass
                | Error::OneClassPresent
                | Error::InvalidInput(_)
                | Error::UnknownKey(_)
                | Error::InvalidValue { .. }
                | Error::MissingParameter(_)
                | Error::ParameterShape { .. }
                | Error::IndivisibleLength { .. }
                | Error::DegenerateProfile(_)
                | Error::Io(_)
        )
    }
}
