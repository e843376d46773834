use crate::tensor::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {ctx}: {left} vs {right}")]
    ShapeMismatch { ctx: &'static str, left: Shape, right: Shape },

    #[error("{ctx}: expected {expected} channels, got {got}")]
    ChannelMismatch { ctx: &'static str, expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar loss, got {0}")]
    NonScalarLoss(Shape),

    #[error("{0}")]
    InvalidInput(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("empty dataset under {0}")]
    EmptyDataset(String),

    #[error("NaN loss at step {step} (lr {lr:e}, batch {batch_ids:?})")]
    NanLoss { step: u64, lr: f64, batch_ids: Vec<String> },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
