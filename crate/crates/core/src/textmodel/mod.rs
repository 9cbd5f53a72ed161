//! Word-level tokenizer and a small decoder-only transformer language model
//! with an explicit key/value past, trainable from scratch.

mod checkpoint;
pub mod graph;
mod model;
mod sample;
pub mod tensor;
mod tokenizer;
mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use graph::{Gradients, Graph, Var};
pub use model::{param_names, param_shapes, ForwardOutput, LMConfig, LanguageModel, LayerKv, ModelInput, PastState};
pub use sample::{pick_top_k, sample, token_distribution, SampleParams};
pub use tensor::{Scalar, Tensor};
pub use tokenizer::{train_tokenizer, Vocab, BOS, EOS, PAD, SPECIALS, UNK};
pub use train::{loss_and_grads, scene_sequences, train_lm, TrainHyper, TrainReport};

use crate::container::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("input is empty")]
    EmptyInput,
    #[error("sequence of {needed} positions exceeds context length {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {0} out of vocabulary")]
    InvalidToken(usize),
    #[error("training diverged at step {step} (loss {loss})")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl ModelError {
    pub fn name(&self) -> &'static str {
        match self {
            ModelError::EmptyCorpus => "EmptyCorpus",
            ModelError::EmptyInput => "EmptyInput",
            ModelError::ContextOverflow { .. } => "ContextOverflow",
            ModelError::InvalidConfig(_) => "InvalidConfig",
            ModelError::InvalidToken(_) => "InvalidToken",
            ModelError::DivergedLoss { .. } => "DivergedLoss",
            ModelError::Format(_) | ModelError::Container(_) => "BadCheckpoint",
        }
    }
}
