//! Shared byte-level BPE tokenizer and the token sequence type.

mod bpe;

use std::ops::Deref;

use serde::{Deserialize, Serialize};

pub use bpe::{train_bpe, BpeModel};

use crate::model::{ModelError, Vocab};

/// Ordered vocabulary ids. Every id is below the vocabulary size and PAD
/// only ever appears as trailing padding.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    pub fn push(&mut self, id: u32) {
        self.0.push(id);
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<(), ModelError> {
        let n = vocab.len();
        if let Some(&bad) = self.0.iter().find(|&&id| id as usize >= n) {
            return Err(ModelError::Vocab(format!("token id {bad} out of range for vocabulary of {n}")));
        }
        let pad = vocab.pad();
        if let Some(first_pad) = self.0.iter().position(|&id| id == pad) {
            if self.0[first_pad..].iter().any(|&id| id != pad) {
                return Err(ModelError::Vocab(format!("PAD at interior position {first_pad}")));
            }
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

impl From<&[u32]> for TokenSeq {
    fn from(v: &[u32]) -> Self {
        Self(v.to_vec())
    }
}

impl FromIterator<u32> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}
