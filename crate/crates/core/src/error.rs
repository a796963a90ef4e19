use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("shape inconsistency at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    #[error("unknown layer kind `{0}`")]
    UnknownLayer(String),

    #[error("rejected input: expected shape {expected:?}, got {got:?}")]
    RejectedInput { expected: Vec<usize>, got: Vec<usize> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is out of range for {class_count} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class {class} has {count} examples, at least 2 are required")]
    InsufficientClassSamples { class: usize, count: usize },

    #[error("profile fingerprint {profile} does not match model fingerprint {model}")]
    ProfileMismatch { profile: String, model: String },

    #[error("profile threshold was computed with scorer `{profile}`, not `{requested}`")]
    ScorerMismatch { profile: String, requested: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter `{name}` = {value} of `{operator}` is outside its legal range")]
    InvalidParameter {
        operator: String,
        name: String,
        value: f32,
    },

    #[error("unknown {family} `{name}` (available: {available})")]
    UnknownName {
        family: &'static str,
        name: String,
        available: String,
    },

    #[error("coverage capacity mismatch: {left} vs {right}")]
    CapacityMismatch { left: usize, right: usize },

    #[error("requested {requested} `{selection}` errors but only {available} are available")]
    InsufficientErrors {
        selection: String,
        requested: usize,
        available: usize,
    },

    #[error("holdout overlaps retraining set in {0} records")]
    HoldoutOverlap(usize),

    #[error("unknown corpus record id {0}")]
    UnknownRecord(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input (files, flags, formats) as
    /// opposed to violated runtime contracts.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::ShapeMismatch { .. }
                | Error::UnknownLayer(_)
                | Error::RejectedInput { .. }
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::CountMismatch { .. }
                | Error::LabelOutOfRange { .. }
                | Error::EmptyDataset
                | Error::InvalidParameter { .. }
                | Error::UnknownName { .. }
                | Error::InvalidConfig(_)
                | Error::UnknownRecord(_)
        )
    }

    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::RejectedInput { .. } => "rejected_input",
            Error::Unsupported(_) => "unsupported",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyDataset => "empty_dataset",
            Error::InsufficientClassSamples { .. } => "insufficient_class_samples",
            Error::ProfileMismatch { .. } => "profile_mismatch",
            Error::ScorerMismatch { .. } => "scorer_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::UnknownName { .. } => "unknown_name",
            Error::CapacityMismatch { .. } => "capacity_mismatch",
            Error::InsufficientErrors { .. } => "insufficient_errors",
            Error::HoldoutOverlap(_) => "holdout_overlap",
            Error::UnknownRecord(_) => "unknown_record",
            Error::InvalidConfig(_) => "invalid_config",
        }
    }
}
