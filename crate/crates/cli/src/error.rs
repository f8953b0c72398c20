use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] aelayers_core::CoreError),
    #[error(transparent)]
    Tensor(#[from] aelayers_tensor::TensorError),
    #[error(transparent)]
    Detect(#[from] aelayers_detect::DetectError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad override '{spec}': {detail}")]
    Override { spec: String, detail: String },
    #[error("stage '{stage}' needs '{missing}' to complete first; run `aelayers {missing}` (or pass --force)")]
    MissingStage { stage: String, missing: String },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("target network changed since training (checksum {found}, expected {expected})")]
    Tampered { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::File { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }
}
