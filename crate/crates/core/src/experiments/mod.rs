//! Config-driven experiment runs, aggregation and result tables.
//!
//! An experiment is one TOML file (see [`ExperimentSpec`]). Every
//! `(corpus, context set)` combination is a *condition*; the empty context
//! set is the baseline. Conditions are named `baseline` or by their context
//! languages joined with `+` (`en`, `en+fr`), and significance pairs refer to
//! those names.

mod runner;
mod table;
pub mod toy;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{BeamConfig, FusionError};
use crate::llm::{JobKind, LlmError};
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::significance::{SignificanceError, DEFAULT_RESAMPLES, MIN_RESAMPLES};
use crate::synthdata::DataError;

pub use runner::{run_experiment, ConditionResult, PairResult, RunOptions, RunResult, RESULT_FILE};
pub use table::{aggregate, render_table, DatasetGroup, ResultTable, TableFormat, TableRow};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad spec or unresolvable resource, detected before any translation.
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Significance(#[from] SignificanceError),
    #[error("{corpus}/{condition} row {row}: {message}")]
    Row {
        corpus: String,
        condition: String,
        row: usize,
        message: String,
    },
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// True for errors caused by the user's input rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn config<T>(msg: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Nmt,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmtSettings {
    /// Checkpoint with an embedded tokenizer.
    pub checkpoint: PathBuf,
    #[serde(default = "one")]
    pub lambda0: f64,
    /// Context weights per context set, aligned with `context_sets`; all 1 when absent.
    #[serde(default)]
    pub lambdas: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    /// Configured from `MULTISRC_LLM_*` environment variables.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    /// `T(source→Target)` markers.
    #[default]
    Marker,
    Echo,
    ContextLanguages,
    /// Answers from the `canned` table, keyed by source sentence.
    Canned,
    /// Answers with the corpus reference for the source sentence.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSettings {
    /// Flow for non-empty context sets; the baseline is always direct.
    pub mode: JobKind,
    pub backend: BackendKind,
    #[serde(default)]
    pub mock: MockKind,
    #[serde(default)]
    pub canned: BTreeMap<String, String>,
    /// Response cache file; in-memory when absent.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_in_flight() -> usize {
    4
}

fn default_attempts() -> u32 {
    3
}

fn default_metrics() -> Vec<String> {
    vec!["bleu".into()]
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// One experiment, as read from TOML:
///
/// ```toml
/// name = "noisy-es"
/// track = "nmt"
/// corpora = ["data/test.tsv"]
/// source_language = "es"
/// target_language = "pt"
/// context_sets = [[], ["en"]]
/// significance = [["en", "baseline"]]
/// seed = 1
///
/// [nmt]
/// checkpoint = "model.json"
///
/// [beam]
/// beam_size = 4
/// ```
///
/// Relative paths are resolved against the spec file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub track: Track,
    pub corpora: Vec<PathBuf>,
    pub source_language: String,
    pub target_language: String,
    pub context_sets: Vec<Vec<String>>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    /// `(a, b)` condition names; each is tested on every corpus.
    #[serde(default)]
    pub significance: Vec<(String, String)>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    /// Sentences translated concurrently.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub beam: BeamConfig,
    #[serde(default)]
    pub groups: Vec<DatasetGroup>,
    #[serde(default)]
    pub nmt: Option<NmtSettings>,
    #[serde(default)]
    pub llm: Option<LlmSettings>,
}

pub const METRICS: &[&str] = &["bleu"];

/// `baseline` for no contexts, else the languages joined with `+`.
pub fn condition_name(contexts: &[String]) -> String {
    if contexts.is_empty() {
        "baseline".into()
    } else {
        contexts.join("+")
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads a spec file and makes its paths absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpora.iter_mut().for_each(fix);
        if let Some(n) = &mut self.nmt {
            fix(&mut n.checkpoint);
        }
        if let Some(cache) = self.llm.as_mut().and_then(|l| l.cache.as_mut()) {
            fix(cache);
        }
    }

    pub fn condition_names(&self) -> Vec<String> {
        self.context_sets.iter().map(|c| condition_name(c)).collect()
    }

    /// Weights for context set `i`.
    pub fn lambdas(&self, i: usize) -> Vec<f64> {
        match self.nmt.as_ref().and_then(|n| n.lambdas.as_ref()) {
            Some(all) => all[i].clone(),
            None => vec![1.0; self.context_sets[i].len()],
        }
    }

    /// Checks everything that does not need files.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return config(format!("bad experiment name {:?}", self.name));
        }
        if self.corpora.is_empty() {
            return config("no corpora listed");
        }
        if self.context_sets.is_empty() {
            return config("no context sets listed");
        }
        if self.source_language.is_empty() || self.target_language.is_empty() {
            return config("source and target languages are required");
        }
        let names = self.condition_names();
        let mut seen = HashSet::new();
        for (set, name) in self.context_sets.iter().zip(&names) {
            if !seen.insert(name) {
                return config(format!("context set {name} listed twice"));
            }
            let mut langs = HashSet::new();
            for l in set {
                if l.is_empty() || !langs.insert(l) {
                    return config(format!("context set {name} has an empty or repeated language"));
                }
                if *l == self.source_language {
                    return config(format!("context set {name} repeats the source language"));
                }
            }
        }
        if self.metrics.is_empty() {
            return config("no metrics listed");
        }
        for m in &self.metrics {
            if !METRICS.contains(&m.as_str()) {
                return config(format!("unknown metric {m:?} (known: {})", METRICS.join(", ")));
            }
        }
        for (a, b) in &self.significance {
            for n in [a, b] {
                if !names.contains(n) {
                    return config(format!("significance pair names unknown condition {n:?}"));
                }
            }
            if a == b {
                return config(format!("significance pair compares {a} with itself"));
            }
        }
        if !self.significance.is_empty() && self.resamples < MIN_RESAMPLES {
            return config(format!("need at least {MIN_RESAMPLES} resamples"));
        }
        if self.parallelism == 0 {
            return config("parallelism must be positive");
        }
        for g in &self.groups {
            if g.members.is_empty() {
                return config(format!("group {} has no members", g.name));
            }
        }
        match self.track {
            Track::Nmt => self.validate_nmt(),
            Track::Llm => self.validate_llm(),
        }
    }

    fn validate_nmt(&self) -> Result<(), ExperimentError> {
        let Some(nmt) = &self.nmt else {
            return config("nmt track needs an [nmt] section");
        };
        if self.llm.is_some() {
            return config("nmt track takes no [llm] section");
        }
        self.beam.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !nmt.lambda0.is_finite() {
            return config("lambda0 must be finite");
        }
        if let Some(all) = &nmt.lambdas {
            if all.len() != self.context_sets.len() {
                return config(format!("{} weight lists for {} context sets", all.len(), self.context_sets.len()));
            }
            for (w, set) in all.iter().zip(&self.context_sets) {
                if w.len() != set.len() || w.iter().any(|x| !x.is_finite()) {
                    return config(format!("weights {w:?} do not fit context set {}", condition_name(set)));
                }
            }
        }
        Ok(())
    }

    fn validate_llm(&self) -> Result<(), ExperimentError> {
        let Some(llm) = &self.llm else {
            return config("llm track needs an [llm] section");
        };
        if self.nmt.is_some() {
            return config("llm track takes no [nmt] section");
        }
        let has_contexts = self.context_sets.iter().any(|s| !s.is_empty());
        if llm.mode == JobKind::Direct && has_contexts {
            return config("direct mode only supports the empty context set");
        }
        if llm.max_in_flight == 0 || llm.max_attempts == 0 {
            return config("max_in_flight and max_attempts must be positive");
        }
        if llm.backend == BackendKind::Mock && llm.mock == MockKind::Canned && llm.canned.is_empty() {
            return config("canned mock needs a [llm.canned] table");
        }
        Ok(())
    }
}
