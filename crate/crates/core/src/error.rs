use thiserror::Error;

#[derive(Debug, Error)]
pub enum FesError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("client {client_id} has no gold or pseudo labels")]
    IneligibleClient { client_id: usize },

    #[error("local training needs at least one labeled example")]
    NoTrainingData,

    #[error("no labeled data anywhere: every client is ineligible for training")]
    NoLabeledData,

    #[error("model shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error(
        "gold quota of {requested} exceeds the {available} samples held by the chosen clients"
    )]
    GoldQuotaTooLarge { requested: usize, available: usize },

    #[error("run invariant violated: {0}")]
    InvariantViolated(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FesError>;
