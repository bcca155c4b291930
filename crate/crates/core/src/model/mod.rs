//! Transformer encoder over token sequences with a classification head and a
//! masked-location head, plus the shared training loop.

mod config;
mod encoder;
mod masking;
mod train;

pub use config::{ModelConfig, NormPlacement, Positional, Task};
pub use encoder::{Encoded, EncoderModel, MODEL_TYPE};
pub use masking::{mask_batch, mask_count, MaskedBatch};
pub use train::{
    argmax, classification_accuracy, mlm_accuracy, mlm_counts, mlm_eval_loss, split_indices, train_classifier,
    train_mlm, write_metric_log, EpochMetrics, SequenceClassifier, TrainConfig, TrainReport, Trainable,
};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} at position {pos} is outside the vocabulary")]
    UnknownToken { id: u32, pos: usize },
    #[error("sequence length {len} is not allowed (max {max})")]
    BadLength { len: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("classification needs at least two distinct labels")]
    SingleClass,
    #[error("label {label} does not fit a model with {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("model has no {0} head")]
    WrongTask(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}
