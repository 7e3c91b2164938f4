//! Error type shared across the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Variants are grouped so a caller (the CLI in particular) can map them to
/// distinct exit codes: I/O and syntax problems, value-domain violations,
/// dangling cross-references, bad call arguments, and external stage failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem failure, always carrying the offending path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content; `locus` names the line/offset inside the file.
    #[error("parse error in {path} ({locus}): {message}")]
    Parse {
        path: PathBuf,
        locus: String,
        message: String,
    },

    /// A value outside its legal domain (negative box extent, score > 1, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A reference that does not resolve (unknown class id, missing image).
    #[error("referential error: {0}")]
    Referential(String),

    /// An operation invoked with inconsistent arguments.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// External adapter or pipeline stage failure.
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, locus: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            locus: locus.into(),
            message: message.into(),
        }
    }

    pub fn stage(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            message: message.into(),
        }
    }

    /// Process exit code the CLI reports for this error class.
    ///
    /// 3 = file/parse, 4 = domain/validation, 5 = adapter/stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Domain(_) | Error::Referential(_) | Error::InvalidArgument(_) => 4,
            Error::Stage { .. } => 5,
        }
    }
}
