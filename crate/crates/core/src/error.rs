use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SdaError>;

#[derive(Debug, Error)]
pub enum SdaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("sample count mismatch: header declares {expected} values, file holds {found}")]
    SampleCountMismatch { expected: usize, found: usize },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid filter design: {0}")]
    FilterDesign(String),

    #[error("signal too short: {len} samples, need more than {required}")]
    SignalTooShort { len: usize, required: usize },

    #[error("unsupported sampling rate {fs_hz} Hz: {reason}")]
    UnsupportedRate { fs_hz: f64, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch norm layer {layer} has no running statistics; train before inference")]
    NoRunningStats { layer: usize },

    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in {tensor} at epoch {epoch}")]
    NonFiniteGradient { tensor: String, epoch: usize },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),
}

impl SdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SdaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            SdaError::Io { .. } => "io",
            SdaError::MalformedHeader { .. } => "malformed_header",
            SdaError::SampleCountMismatch { .. } => "sample_count_mismatch",
            SdaError::InvalidRecord(_) => "invalid_record",
            SdaError::InvalidAnnotation(_) => "invalid_annotation",
            SdaError::Csv(_) => "csv",
            SdaError::Json(_) => "json",
            SdaError::FilterDesign(_) => "filter_design",
            SdaError::SignalTooShort { .. } => "signal_too_short",
            SdaError::UnsupportedRate { .. } => "unsupported_rate",
            SdaError::Shape(_) => "shape",
            SdaError::NoRunningStats { .. } => "no_running_stats",
            SdaError::ArchitectureMismatch { .. } => "architecture_mismatch",
            SdaError::Checkpoint(_) => "checkpoint",
            SdaError::Config(_) => "config",
            SdaError::NonFiniteGradient { .. } => "non_finite_gradient",
            SdaError::Undefined(_) => "undefined",
            SdaError::Dataset(_) => "dataset",
            SdaError::Misaligned(_) => "misaligned",
        }
    }
}
