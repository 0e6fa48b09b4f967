use std::path::PathBuf;

use crate::format::FormatError;
use crate::wav::WavError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav { path: PathBuf, source: WavError },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("feature extraction failed for {} file(s):\n{}", .0.len(), list(.0))]
    Features(Vec<(PathBuf, String)>),
    #[error(transparent)]
    Core(#[from] emonet_core::Error),
}

fn list(failures: &[(PathBuf, String)]) -> String {
    failures
        .iter()
        .map(|(p, e)| format!("  {}: {e}", p.display()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => exit::USAGE,
            Error::Core(
                emonet_core::Error::NonFiniteLoss { .. } | emonet_core::Error::NonFinite(_),
            ) => exit::NUMERIC,
            _ => exit::DATA,
        }
    }
}
