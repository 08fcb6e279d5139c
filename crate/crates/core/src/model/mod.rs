//! A small pre-norm transformer with self-attention and average-attention decoder
//! layers, trained with a hand-written reverse-mode tape.

pub mod config;
pub mod decode;
pub mod net;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod translate;
pub mod vocab;

use thiserror::Error;

pub use config::{layer_plan, Arch, LayerKind, ModelConfig, TrainHyper};
pub use decode::{beam_search, greedy, nucleus, nucleus_decode, sample_nucleus, DecodeState, Hypothesis, StepModel};
pub use net::{Dropout, Example, Transformer};
pub use params::{read_checkpoint, write_checkpoint, Checkpoint, Params};
pub use tensor::Tensor;
pub use train::{corpus_loss, grad_check, GradCheck, LrSchedule, TrainLog, Trainer};
pub use translate::{Ensemble, Strategy, TranslationModel, Translator};
pub use vocab::{Vocab, EOS, EOS_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    VocabOutOfRange { id: usize, size: usize },
    #[error("empty source sentence")]
    EmptySource,
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("loss or parameters became non-finite at update {step}")]
    NonFiniteLoss { step: usize },
    #[error("decoder state does not match the model")]
    StateMismatch,
    #[error("ensemble members have different vocabularies")]
    VocabMismatch,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
