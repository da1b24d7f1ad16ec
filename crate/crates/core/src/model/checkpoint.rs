//! Model checkpoint files.
//!
//! A checkpoint is one JSON document:
//!
//! ```json
//! {
//!   "format": "multisrc-checkpoint",
//!   "version": 1,
//!   "model": { "kind": "transformer", "config": {..}, "vocab": {..}, "params": [..] },
//!   "tokenizer": "<BPE model file text, optional>"
//! }
//! ```
//!
//! Parameter matrices are stored as `{rows, cols, data}` with `data` the
//! base64 of the little-endian f32 bytes, so a round trip is bit-exact.
//! `model.kind` is either `transformer` or `mock_table`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::{MockTableModel, ModelConfig, ModelError, Transformer, TranslationModel, Vocab};
use crate::tokenizer::{BpeModel, TokenSeq};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "multisrc-checkpoint";

/// Any model that can live in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Transformer(Transformer),
    MockTable(MockTableModel),
}

impl From<Transformer> for AnyModel {
    fn from(m: Transformer) -> Self {
        AnyModel::Transformer(m)
    }
}

impl From<MockTableModel> for AnyModel {
    fn from(m: MockTableModel) -> Self {
        AnyModel::MockTable(m)
    }
}

impl TranslationModel for AnyModel {
    fn vocab(&self) -> &Vocab {
        match self {
            AnyModel::Transformer(m) => m.vocab(),
            AnyModel::MockTable(m) => m.vocab(),
        }
    }

    fn max_seq_len(&self) -> usize {
        match self {
            AnyModel::Transformer(m) => m.max_seq_len(),
            AnyModel::MockTable(m) => m.max_seq_len(),
        }
    }

    fn next_token_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f32>, ModelError> {
        match self {
            AnyModel::Transformer(m) => m.next_token_logprobs(source, prefix),
            AnyModel::MockTable(m) => m.next_token_logprobs(source, prefix),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StoredModel {
    Transformer {
        config: ModelConfig,
        vocab: Vocab,
        params: Vec<Matrix>,
    },
    MockTable(MockTableModel),
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    model: StoredModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokenizer: Option<String>,
}

/// A loaded checkpoint: the model plus the tokenizer it was trained with, if stored.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub tokenizer: Option<BpeModel>,
}

impl Checkpoint {
    pub fn new(model: impl Into<AnyModel>) -> Self {
        Self {
            model: model.into(),
            tokenizer: None,
        }
    }

    pub fn with_tokenizer(mut self, tokenizer: BpeModel) -> Self {
        self.tokenizer = Some(tokenizer);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let model = match &self.model {
            AnyModel::Transformer(m) => StoredModel::Transformer {
                config: m.config().clone(),
                vocab: m.vocab().clone(),
                params: m.params().to_vec(),
            },
            AnyModel::MockTable(m) => StoredModel::MockTable(m.clone()),
        };
        if let Some(tok) = &self.tokenizer {
            if tok.vocab() != self.model.vocab() {
                return Err(ModelError::Vocab("tokenizer vocabulary differs from model vocabulary".into()));
            }
        }
        let stored = StoredCheckpoint {
            format: FORMAT_NAME.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            tokenizer: self.tokenizer.as_ref().map(BpeModel::to_text),
        };
        let json = serde_json::to_string(&stored).map_err(|e| ModelError::Format(e.to_string()))?;
        // Write-then-rename so a crash never leaves a truncated checkpoint behind.
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let stored: StoredCheckpoint =
            serde_json::from_str(text).map_err(|e| ModelError::Format(format!("unreadable checkpoint: {e}")))?;
        if stored.format != FORMAT_NAME {
            return Err(ModelError::Format(format!("unexpected format tag {:?}", stored.format)));
        }
        if stored.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                stored.version
            )));
        }
        let model = match stored.model {
            StoredModel::Transformer { config, vocab, params } => {
                AnyModel::Transformer(Transformer::from_parts(config, vocab, params)?)
            }
            StoredModel::MockTable(m) => AnyModel::MockTable(m),
        };
        let tokenizer = match stored.tokenizer {
            Some(text) => {
                let tok = BpeModel::from_text(&text).map_err(|e| ModelError::Format(format!("embedded tokenizer: {e}")))?;
                if tok.vocab() != model.vocab() {
                    return Err(ModelError::Format("embedded tokenizer vocabulary differs from model".into()));
                }
                Some(tok)
            }
            None => None,
        };
        Ok(Self { model, tokenizer })
    }
}

pub fn save_model(model: impl Into<AnyModel>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    Checkpoint::new(model).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel, ModelError> {
    Ok(Checkpoint::load(path)?.model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    Checkpoint::load(path)
}
