use std::path::PathBuf;

/// Errors of the std layer: file formats and IO on top of the core errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] fsir_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a {expected} file (bad magic bytes)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("file ends in the middle of a record")]
    TruncatedFile,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("item `{0}` has no image path to copy")]
    MissingImagePath(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Core(e) => e.code(),
            Error::Io { .. } => "IO_ERROR",
            Error::BadMagic { .. } => "BAD_MAGIC",
            Error::VersionUnsupported(_) => "VERSION_UNSUPPORTED",
            Error::TruncatedFile => "TRUNCATED_FILE",
            Error::Line { .. } | Error::Json(_) | Error::Toml(_) => "SCHEMA_ERROR",
            Error::MissingImagePath(_) => "MISSING_IMAGE_PATH",
            Error::Invalid(_) => "INVALID_ARGUMENT",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
