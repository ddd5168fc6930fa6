use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An objective or parameter entry evaluated to NaN or infinity.
    #[error("non-finite value in `{entry}`")]
    NonFinite { entry: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("channel mismatch: expected {expected} channels, got {actual}")]
    Channels { expected: usize, actual: usize },

    #[error("second-order differentiation is not available on this graph")]
    SecondOrderUnavailable,

    #[error("degenerate CKA input: {0}")]
    DegenerateCka(&'static str),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(&'static str),

    #[error("CDR is undefined: the disc region is empty")]
    UndefinedCdr,

    #[error("quiz-pool leakage: sample {id} reached student supervision")]
    Leakage { id: u64 },

    #[error("stage isolation violated: {0}")]
    StageIsolation(String),

    #[error("unexpected mask value {value} at ({row}, {col}) in {path}")]
    MaskValue {
        value: u8,
        row: u32,
        col: u32,
        path: PathBuf,
    },

    #[error("image/mask size mismatch for {path}: image {image:?}, mask {mask:?}")]
    MaskSize {
        path: PathBuf,
        image: (u32, u32),
        mask: (u32, u32),
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Short machine-parsable tag, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "non_finite",
            Error::Shape { .. } | Error::Channels { .. } => "shape",
            Error::SecondOrderUnavailable => "capability",
            Error::DegenerateCka(_) => "degenerate_cka",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::DatasetTooSmall(_) => "dataset_too_small",
            Error::UndefinedAuc(_) => "undefined_auc",
            Error::UndefinedCdr => "undefined_cdr",
            Error::Leakage { .. } => "leakage",
            Error::StageIsolation(_) => "stage_isolation",
            Error::MaskValue { .. } | Error::MaskSize { .. } => "mask",
            Error::MissingFile(_) => "missing_file",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
