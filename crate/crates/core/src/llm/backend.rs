//! Chat-completion backends.
//!
//! The wire protocol is a minimal chat-completion exchange:
//!
//! ```text
//! POST {endpoint}
//! Authorization: Bearer {key}
//! {"model": "...", "messages": [{"role": "user", "content": PROMPT}], "temperature": 0.0}
//!
//! -> {"choices": [{"message": {"content": "..."}}]}
//! ```
//!
//! Provider adapters map onto this shape; OpenAI-compatible servers accept it as is.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: None }
    }
}

pub trait ChatBackend: Send + Sync {
    /// Stable string naming the backend and model, part of every cache key.
    fn identity(&self) -> String;
    /// One completion. Transient failures should come back as [`LlmError::Retryable`].
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError>;
}

type CustomFn = dyn Fn(&str) -> String + Send + Sync;

/// What a [`MockBackend`] answers.
#[derive(Clone)]
pub enum Behavior {
    Constant(String),
    /// The prompt itself.
    Echo,
    /// `T({source sentence}→{target language name})`, read from the prompt.
    Marker,
    /// Context language names in prompt order, joined by `+`.
    ContextLanguages,
    /// Answer looked up by source sentence; unknown sentences fail.
    Canned(HashMap<String, String>),
    Custom(Arc<CustomFn>),
}

impl fmt::Debug for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::Constant(s) => write!(f, "Constant({s:?})"),
            Behavior::Echo => f.write_str("Echo"),
            Behavior::Marker => f.write_str("Marker"),
            Behavior::ContextLanguages => f.write_str("ContextLanguages"),
            Behavior::Canned(m) => write!(f, "Canned({} entries)", m.len()),
            Behavior::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Deterministic in-process backend with a call log and failure injection.
#[derive(Debug)]
pub struct MockBackend {
    behavior: Behavior,
    name: String,
    fail_first: AtomicU32,
    calls: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(behavior: Behavior) -> Self {
        Self {
            behavior,
            name: "mock".into(),
            fail_first: AtomicU32::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    /// The next `n` calls fail with a retryable error.
    pub fn failing_first(self, n: u32) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    /// Prompts received so far, failed attempts included, in arrival order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

/// Value after `"{label}: "` on the first line that has it.
fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.split_once(&format!("{label}: ")).map(|(_, v)| v))
}

fn target_name(prompt: &str) -> &str {
    prompt
        .lines()
        .find_map(|l| l.strip_suffix(" TRANSLATION:"))
        .unwrap_or("?")
}

fn context_languages(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| {
            let (head, _) = l.split_once(": ")?;
            let (lang, rest) = head.split_once(" CONTEXT")?;
            (rest.is_empty() || rest.trim_start().parse::<usize>().is_ok()).then_some(lang)
        })
        .collect()
}

impl ChatBackend for MockBackend {
    fn identity(&self) -> String {
        format!("{}:{:?}", self.name, self.behavior)
    }

    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<String, LlmError> {
        self.calls.lock().unwrap().push(prompt.to_string());
        let pending = self.fail_first.load(Ordering::SeqCst);
        if pending > 0 {
            self.fail_first.store(pending - 1, Ordering::SeqCst);
            return Err(LlmError::Retryable("injected failure".into()));
        }
        let source = field(prompt, "SOURCE");
        Ok(match &self.behavior {
            Behavior::Constant(s) => s.clone(),
            Behavior::Echo => prompt.to_string(),
            Behavior::Marker => format!("T({}→{})", source.unwrap_or(""), target_name(prompt)),
            Behavior::ContextLanguages => context_languages(prompt).join("+"),
            Behavior::Canned(map) => {
                let key = source.unwrap_or("");
                map.get(key)
                    .cloned()
                    .ok_or_else(|| LlmError::Backend(format!("no canned answer for {key:?}")))?
            }
            Behavior::Custom(f) => f(prompt),
        })
    }
}

/// Connection settings for [`HttpBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
}

impl HttpConfig {
    pub const ENDPOINT_VAR: &'static str = "MULTISRC_LLM_ENDPOINT";
    pub const KEY_VAR: &'static str = "MULTISRC_LLM_API_KEY";
    pub const MODEL_VAR: &'static str = "MULTISRC_LLM_MODEL";

    /// Reads `MULTISRC_LLM_ENDPOINT`, `MULTISRC_LLM_API_KEY` and `MULTISRC_LLM_MODEL`.
    pub fn from_env() -> Result<Self, LlmError> {
        let endpoint = std::env::var(Self::ENDPOINT_VAR)
            .map_err(|_| LlmError::Config(format!("{} is not set", Self::ENDPOINT_VAR)))?;
        let model = std::env::var(Self::MODEL_VAR)
            .map_err(|_| LlmError::Config(format!("{} is not set", Self::MODEL_VAR)))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(Self::KEY_VAR).ok().filter(|k| !k.is_empty()),
            model,
            timeout_secs: 120,
        })
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        HttpConfig::from_env().map(Self::new)
    }
}

impl ChatBackend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}:{}", self.config.endpoint, self.config.model)
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [Message { role: "user", content: prompt }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        };
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                LlmError::Retryable(format!("HTTP {code}"))
            }
            ureq::Error::StatusCode(code) => LlmError::Backend(format!("HTTP {code}")),
            ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed => {
                LlmError::Retryable(e.to_string())
            }
            other => LlmError::Backend(other.to_string()),
        })?;
        let parsed: ChatResponse = resp
            .into_body()
            .read_json()
            .map_err(|e| LlmError::Backend(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Backend("response has no choices".into()))
    }
}
