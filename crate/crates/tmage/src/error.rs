use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

/// Manifest problems, one variant per failure class.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {0} does not exist")]
    Missing(PathBuf),
    #[error("manifest {path}: {detail}")]
    Schema { path: PathBuf, detail: String },
    #[error("manifest {0}: empty manifest")]
    Empty(PathBuf),
    #[error("manifest {path}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("manifest {path}: record {id:?} points to missing file {target}")]
    DanglingPath { path: PathBuf, id: String, target: PathBuf },
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] tmage_core::Error),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{path}: weights do not match the model configuration: {diff}")]
    Mismatch { path: PathBuf, diff: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for usage, configuration and input-validation errors, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Manifest(_) | Self::Mismatch { .. } => 2,
            Self::Core(tmage_core::Error::Config(_) | tmage_core::Error::Param(_)) => 2,
            _ => 1,
        }
    }
}
