//! Desk-scale decoder-only transformer with exact backpropagation.
//!
//! The model exists to produce ground-truth per-sample gradients for the
//! attention projections. It is small enough that every gradient can be
//! checked against central differences.

mod corpus;
mod fit;
mod gradcheck;
pub(crate) mod ops;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{synth_corpus, CorpusMode, TOY_VOCAB};
pub use fit::{fit, FitConfig, FitReport};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{LayerParams, ModelConfig, ModelParams, INIT_STD, MAX_CONTEXT};
pub use transformer::{
    backward_gradients, cross_entropy, cross_entropy_grad, forward_logits, forward_loss,
    loss_and_grads,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds model context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("sample vocabulary {sample} does not match model vocabulary {model}")]
    VocabMismatch { model: usize, sample: usize },
    #[error("token id {id} out of range for vocabulary {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("response must contain at least one token")]
    EmptyResponse,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("model parameters contain non-finite values")]
    NonFiniteParams,
    #[error("finite-difference step must lie in (0, 1e-3], got {0}")]
    InvalidStep(f64),
}

/// An instruction/response pair of integer tokens.
///
/// Instruction tokens equal to `pad` are padding: they are masked out of
/// attention and take no position, so they never change the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub instruction: Vec<u32>,
    pub response: Vec<u32>,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<u32>,
}

impl TokenSequence {
    pub fn new(instruction: Vec<u32>, response: Vec<u32>, vocab_size: usize) -> Self {
        Self {
            instruction,
            response,
            vocab_size,
            pad: None,
        }
    }

    pub fn with_pad(mut self, pad: u32) -> Self {
        self.pad = Some(pad);
        self
    }

    /// Same response, no instruction.
    pub fn without_instruction(&self) -> Self {
        Self {
            instruction: Vec::new(),
            response: self.response.clone(),
            vocab_size: self.vocab_size,
            pad: self.pad,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.response.is_empty() {
            return Err(ModelError::EmptyResponse);
        }
        let vocab = self.vocab_size;
        match self
            .instruction
            .iter()
            .chain(&self.response)
            .find(|&&t| t as usize >= vocab)
        {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    pub(crate) fn unpadded_instruction(&self) -> impl Iterator<Item = u32> + '_ {
        let pad = self.pad;
        self.instruction
            .iter()
            .copied()
            .filter(move |&t| Some(t) != pad)
    }
}
