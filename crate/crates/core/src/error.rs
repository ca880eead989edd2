use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("adapter sites do not match the backbone: expected {expected:?}, got {got:?}")]
    SiteMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("unknown modality {0}")]
    UnknownModality(usize),
    #[error("unknown dataset {dataset:?} in modality {modality}")]
    UnknownDataset { modality: usize, dataset: String },
    #[error("training diverged at stage {stage}, step {step}: loss {loss}")]
    Diverged { stage: usize, step: usize, loss: f32 },
    #[error("benchmark generation failed: {0}")]
    Generation(String),
    #[error("score matrix incomplete: missing S[{stage}][{modality}][{dataset}]")]
    IncompleteMatrix { stage: usize, modality: usize, dataset: usize },
    #[error("frozen tensor {0} was modified")]
    FrozenTampered(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
