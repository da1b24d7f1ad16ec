//! Append-only response cache.
//!
//! One JSON object per line: `{"key": HEX, "value": STRING, "timestamp": UNIX_SECS}`.
//! The key is the SHA-256 of the JSON array `[identity, prompt, params]`.
//! A partial trailing line (from a crash mid-append) is cut off on load;
//! for duplicate keys the last line wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::GenerationParams;
use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub value: String,
    pub timestamp: u64,
}

pub fn cache_key(identity: &str, prompt: &str, params: &GenerationParams) -> String {
    let material = serde_json::to_vec(&(identity, prompt, params)).expect("params serialize");
    hex::encode(Sha256::digest(&material))
}

/// Concurrent readers, one appending writer.
#[derive(Debug, Default)]
pub struct ResponseCache {
    map: RwLock<HashMap<String, String>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    /// A cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) the cache file at `path` and loads its entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut map = HashMap::new();
        let mut valid_len = None;
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut offset = 0;
            let mut lines = text.split_inclusive('\n').enumerate().peekable();
            while let Some((i, line)) = lines.next() {
                let is_last = lines.peek().is_none();
                if !line.trim().is_empty() {
                    match serde_json::from_str::<CacheEntry>(line) {
                        Ok(e) if line.ends_with('\n') || !is_last => {
                            map.insert(e.key, e.value);
                        }
                        _ if is_last => {
                            log::warn!("dropping truncated last line of {}", path.display());
                            valid_len = Some(offset as u64);
                            break;
                        }
                        Ok(_) => unreachable!(),
                        Err(e) => {
                            return Err(LlmError::Cache(format!("{} line {}: {e}", path.display(), i + 1)));
                        }
                    }
                }
                offset += line.len();
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if let Some(len) = valid_len {
            file.set_len(len)?;
        }
        Ok(Self {
            map: RwLock::new(map),
            file: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.map.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: &str, value: &str) -> Result<(), LlmError> {
        if let Some(file) = &self.file {
            let entry = CacheEntry {
                key: key.to_string(),
                value: value.to_string(),
                timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            };
            let mut line = serde_json::to_string(&entry).map_err(|e| LlmError::Cache(e.to_string()))?;
            line.push('\n');
            let mut f = file.lock().unwrap();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.map.write().unwrap().insert(key.to_string(), value.to_string());
        Ok(())
    }
}
