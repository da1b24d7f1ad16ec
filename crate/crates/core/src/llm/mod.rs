//! LLM translation flows: direct, contextual (gold contexts) and sequential
//! (model-generated contexts), run against a pluggable chat backend with a
//! response cache and retries.

mod backend;
mod cache;
mod pipeline;
mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{Behavior, ChatBackend, GenerationParams, HttpBackend, HttpConfig, MockBackend};
pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use pipeline::{
    jobs_from_corpus, read_batch_records, write_batch_records, BatchRecord, JobKind, Pipeline, RetryPolicy,
    SequentialOutput,
};
pub use prompt::{clean_completion, language_name, render_prompt};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid job: {0}")]
    Validation(String),
    #[error("backend failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    /// A backend call failed but may succeed if retried.
    #[error("retryable backend error: {0}")]
    Retryable(String),
    /// A backend call failed in a way retrying cannot fix.
    #[error("backend error: {0}")]
    Backend(String),
    #[error("sequential step {step} failed: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<LlmError>,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// Attempts made before giving up, for transport errors (also through a step).
    pub fn attempts(&self) -> Option<u32> {
        match self {
            LlmError::Transport { attempts, .. } => Some(*attempts),
            LlmError::Step { source, .. } => source.attempts(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JobMode {
    Direct,
    /// Gold `(language, sentence)` contexts, in prompt order.
    Contextual { contexts: Vec<(String, String)> },
    /// Context languages the model translates into first.
    Sequential { context_languages: Vec<String> },
}

impl JobMode {
    pub fn name(&self) -> &'static str {
        match self {
            JobMode::Direct => "direct",
            JobMode::Contextual { .. } => "contextual",
            JobMode::Sequential { .. } => "sequential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationJob {
    pub source_language: String,
    pub target_language: String,
    pub source: String,
    #[serde(flatten)]
    pub mode: JobMode,
}

impl TranslationJob {
    pub fn direct(src: &str, tgt: &str, source: &str) -> Self {
        Self {
            source_language: src.into(),
            target_language: tgt.into(),
            source: source.into(),
            mode: JobMode::Direct,
        }
    }

    pub fn contextual(src: &str, tgt: &str, source: &str, contexts: &[(&str, &str)]) -> Self {
        Self {
            mode: JobMode::Contextual {
                contexts: contexts.iter().map(|(l, s)| (l.to_string(), s.to_string())).collect(),
            },
            ..Self::direct(src, tgt, source)
        }
    }

    pub fn sequential(src: &str, tgt: &str, source: &str, context_languages: &[&str]) -> Self {
        Self {
            mode: JobMode::Sequential {
                context_languages: context_languages.iter().map(|l| l.to_string()).collect(),
            },
            ..Self::direct(src, tgt, source)
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.source.trim().is_empty() {
            return Err(LlmError::Validation("empty source sentence".into()));
        }
        if self.source_language.is_empty() || self.target_language.is_empty() {
            return Err(LlmError::Validation("empty language code".into()));
        }
        match &self.mode {
            JobMode::Direct => Ok(()),
            JobMode::Contextual { contexts } if contexts.is_empty() => {
                Err(LlmError::Validation("contextual mode needs at least one context".into()))
            }
            JobMode::Contextual { contexts } => match contexts.iter().find(|(_, s)| s.trim().is_empty()) {
                Some((l, _)) => Err(LlmError::Validation(format!("empty {l} context sentence"))),
                None => Ok(()),
            },
            JobMode::Sequential { context_languages } if context_languages.is_empty() => {
                Err(LlmError::Validation("sequential mode needs at least one context language".into()))
            }
            JobMode::Sequential { context_languages } if context_languages.iter().any(|l| l.is_empty()) => {
                Err(LlmError::Validation("empty context language code".into()))
            }
            JobMode::Sequential { .. } => Ok(()),
        }
    }
}
