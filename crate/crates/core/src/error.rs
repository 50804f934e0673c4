use std::path::PathBuf;

/// Errors produced by the detection pipeline and its harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown class string {0:?}; not in the prompt vocabulary")]
    Vocabulary(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint load error at {field}: {reason}")]
    Load { field: String, reason: String },

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    /// Short machine-readable tag for error manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Vocabulary(_) => "vocabulary",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidLabel(_) => "invalid_label",
            Error::Numeric(_) => "numeric",
            Error::Load { .. } => "load",
            Error::NotFound(_) => "not_found",
            Error::Parse { .. } => "parse",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
