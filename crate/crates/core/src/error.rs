use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(thiserror::Error, Debug)]
pub enum CciError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed tensor container: {0}")]
    Container(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("duplicate label `{0}` in text bank")]
    DuplicateLabel(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("judge error: {0}")]
    Judge(String),
    #[error("external hook failed: {0}")]
    Hook(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl CciError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CciError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(expected: usize, found: usize, context: impl Into<String>) -> Self {
        CciError::DimensionMismatch {
            expected,
            found,
            context: context.into(),
        }
    }
}

pub type Result<T, E = CciError> = std::result::Result<T, E>;
