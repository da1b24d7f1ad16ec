//! Conditional translation models.
//!
//! A [`TranslationModel`] answers one question: given a tagged source
//! sequence and a decoder prefix, what is the log-distribution of the next
//! target token? Two implementations live here: the trainable
//! [`Transformer`] and the table-driven [`MockTableModel`] used as a test
//! oracle for decoding arithmetic.

mod checkpoint;
mod f32_codec;
mod mock;
pub mod tensor;
mod train;
mod transformer;
mod vocab;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, load_model, save_model, AnyModel, Checkpoint, CHECKPOINT_VERSION};
pub use mock::MockTableModel;
pub use train::{train, token_accuracy, TrainOptions, TrainReport, TranslationPair};
pub use transformer::{ModelConfig, Transformer};
pub use vocab::{lang_tag_token, Vocab, BOS, EOS, PAD, UNK};

use crate::tokenizer::TokenSeq;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub trait TranslationModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    fn max_seq_len(&self) -> usize;

    /// Log-probabilities of the token following `prefix`, conditioned on `source`.
    ///
    /// `source` must start with a language tag, `prefix` with BOS.
    fn next_token_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f32>, ModelError>;
}

impl<M: TranslationModel + ?Sized> TranslationModel for &M {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn max_seq_len(&self) -> usize {
        (**self).max_seq_len()
    }

    fn next_token_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f32>, ModelError> {
        (**self).next_token_logprobs(source, prefix)
    }
}

impl<M: TranslationModel + ?Sized> TranslationModel for Box<M> {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn max_seq_len(&self) -> usize {
        (**self).max_seq_len()
    }

    fn next_token_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f32>, ModelError> {
        (**self).next_token_logprobs(source, prefix)
    }
}

/// Shared precondition check for `next_token_logprobs` implementations.
pub fn check_query(vocab: &Vocab, max_len: usize, source: &TokenSeq, prefix: &TokenSeq) -> Result<(), ModelError> {
    let Some(&first) = source.first() else {
        return Err(ModelError::Input("empty source sequence".into()));
    };
    for seq in [source, prefix] {
        if seq.len() > max_len {
            return Err(ModelError::Length {
                len: seq.len(),
                max: max_len,
            });
        }
        seq.validate(vocab)?;
    }
    if !vocab.is_lang_tag(first) {
        return Err(ModelError::Vocab(format!(
            "source must begin with a language tag, found id {first}"
        )));
    }
    if prefix.first() != Some(&vocab.bos()) {
        return Err(ModelError::Input("prefix must begin with BOS".into()));
    }
    Ok(())
}

/// `log Σ exp(v)` in f64.
pub fn log_sum_exp(values: &[f32]) -> f64 {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if max == f64::NEG_INFINITY {
        return max;
    }
    values.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max
}
