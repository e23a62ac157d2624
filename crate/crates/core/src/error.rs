use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("embedding row {row} has near-zero norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },
    #[error("cannot renormalise a predicted embedding of norm {0:e}")]
    DegeneratePrediction(f64),
    #[error("time {t} outside [{t_min}, {t_max}]")]
    TimeOutOfRange { t: f64, t_min: f64, t_max: f64 },
    #[error("non-finite activations in layer {layer}")]
    NonFiniteActivation { layer: String },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("non-finite sampler state at step {0}")]
    NonFiniteState(usize),
    #[error("token {0:?} not in vocabulary")]
    UnknownToken(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("checkpoint format version {found} is incompatible with supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
