//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough context
//! to name the offending field, file or bound, and each variant maps to a
//! stable one-word category via [`Error::category`] so the CLI can emit
//! machine-parsable single-line diagnostics.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A raster/checkpoint header was unreadable or a header field held a
    /// value the format does not allow. `field` names the offending key.
    #[error("{path}: malformed header field `{field}`: {detail}")]
    MalformedHeader {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("{path}: payload holds {found} values, header dims require {expected}")]
    PayloadLengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: non-finite spacing on axis {axis}")]
    NonFiniteSpacing { path: PathBuf, axis: usize },

    #[error("{path}: invalid payload: {detail}")]
    InvalidPayload { path: PathBuf, detail: String },

    #[error("non-finite voxel at linear index {index}")]
    NonFiniteVoxel { index: usize },

    #[error("invalid {what}: {detail}")]
    InvalidArgument { what: String, detail: String },

    #[error("patch region out of bounds: {detail}")]
    OutOfBounds { detail: String },

    #[error("spacing mismatch: {expected:?} vs {found:?} (tolerance {tol} mm)")]
    SpacingMismatch {
        expected: [f64; 3],
        found: [f64; 3],
        tol: f64,
    },

    #[error("grid dims mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("mask has no foreground voxels")]
    EmptyMask,

    #[error("mask has no background voxels")]
    FullMask,

    #[error("scale factor {factor} outside [{lo}, {hi}]")]
    FactorOutOfRange { factor: f64, lo: f64, hi: f64 },

    #[error("scaled shape exceeds grid bounds")]
    ShapeExceedsGrid,

    #[error("codec fit needs at least {needed} training grids, got {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("timestep {t} outside 1..={t_count}")]
    TimestepOutOfRange { t: usize, t_count: usize },

    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("sampler state non-finite at reverse step {step} (norm {norm})")]
    NonFiniteState { step: usize, norm: f64 },

    #[error("shape synthesis failed after {tries} tries: {reasons}")]
    RetriesExhausted { tries: usize, reasons: String },

    #[error("no placement candidate admits a {target_mm:.2} mm lesion after {tries} target draws")]
    NoQualifyingCandidate { target_mm: f64, tries: usize },

    #[error("config key `{key}` out of bounds: {detail}")]
    ConfigBound { key: String, detail: String },

    #[error("config parse error: {detail}")]
    ConfigParse { detail: String },

    #[error("feature set needs at least {needed} rows, got {found}")]
    TooFewRows { needed: usize, found: usize },

    #[error("dataset verification failed: {detail}")]
    VerificationFailed { detail: String },
}

impl Error {
    /// Stable one-word category used as the machine-parsable prefix of CLI
    /// error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader { .. }
            | Error::PayloadLengthMismatch { .. }
            | Error::NonFiniteSpacing { .. }
            | Error::InvalidPayload { .. }
            | Error::NonFiniteVoxel { .. } => "format",
            Error::InvalidArgument { .. } => "argument",
            Error::OutOfBounds { .. }
            | Error::SpacingMismatch { .. }
            | Error::DimsMismatch { .. } => "bounds",
            Error::EmptyMask
            | Error::FullMask
            | Error::FactorOutOfRange { .. }
            | Error::ShapeExceedsGrid => "shape",
            Error::TooFewSamples { .. } => "codec",
            Error::TimestepOutOfRange { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteState { .. } => "training",
            Error::RetriesExhausted { .. } | Error::NoQualifyingCandidate { .. } => "synthesis",
            Error::ConfigBound { .. } | Error::ConfigParse { .. } => "config",
            Error::TooFewRows { .. } => "metrics",
            Error::VerificationFailed { .. } => "verify",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::MalformedHeader {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
