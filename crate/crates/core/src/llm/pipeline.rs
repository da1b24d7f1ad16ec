use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{ChatBackend, GenerationParams};
use super::cache::{cache_key, ResponseCache};
use super::prompt::{clean_completion, render_prompt};
use super::{JobMode, LlmError, TranslationJob};
use crate::synthdata::MultiParallelCorpus;

/// Exponential backoff: attempt `k` (from 1) waits `initial_delay * 2^(k-1)`,
/// capped at `max_delay`, before attempt `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub initial_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1).min(16));
        self.initial_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequentialOutput {
    pub translation: String,
    /// `(language, generated sentence)` in context order, used verbatim in the final prompt.
    pub intermediates: Vec<(String, String)>,
}

/// One translated row of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub row: usize,
    pub mode: String,
    pub source_language: String,
    pub target_language: String,
    pub source: String,
    /// Contexts that went into the final prompt.
    pub contexts: Vec<(String, String)>,
    /// Model-generated contexts (sequential mode only).
    pub intermediates: Vec<(String, String)>,
    pub translation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Direct,
    Contextual,
    Sequential,
}

impl FromStr for JobKind {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(JobKind::Direct),
            "contextual" => Ok(JobKind::Contextual),
            "sequential" => Ok(JobKind::Sequential),
            other => Err(LlmError::Validation(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for JobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobKind::Direct => "direct",
            JobKind::Contextual => "contextual",
            JobKind::Sequential => "sequential",
        })
    }
}

/// Builds one job per corpus row. Contextual jobs take their contexts from
/// the corpus columns; sequential jobs only need the language codes.
pub fn jobs_from_corpus(
    corpus: &MultiParallelCorpus,
    source_language: &str,
    target_language: &str,
    kind: JobKind,
    context_languages: &[String],
) -> Result<Vec<TranslationJob>, LlmError> {
    let missing = |code: &str| LlmError::Validation(format!("corpus {} has no {code:?} column", corpus.name()));
    let src = corpus.column(source_language).ok_or_else(|| missing(source_language))?;
    match kind {
        JobKind::Direct if !context_languages.is_empty() => {
            return Err(LlmError::Validation("direct mode takes no context languages".into()))
        }
        JobKind::Contextual | JobKind::Sequential if context_languages.is_empty() => {
            return Err(LlmError::Validation(format!("{kind} mode needs at least one context language")))
        }
        _ => {}
    }
    let ctx_cols = if kind == JobKind::Contextual {
        context_languages
            .iter()
            .map(|l| corpus.column(l).ok_or_else(|| missing(l)))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let jobs = src
        .iter()
        .enumerate()
        .map(|(i, s)| TranslationJob {
            source_language: source_language.to_string(),
            target_language: target_language.to_string(),
            source: s.to_string(),
            mode: match kind {
                JobKind::Direct => JobMode::Direct,
                JobKind::Contextual => JobMode::Contextual {
                    contexts: context_languages
                        .iter()
                        .zip(&ctx_cols)
                        .map(|(l, col)| (l.clone(), col[i].to_string()))
                        .collect(),
                },
                JobKind::Sequential => JobMode::Sequential {
                    context_languages: context_languages.to_vec(),
                },
            },
        })
        .collect();
    Ok(jobs)
}

pub fn write_batch_records(path: impl AsRef<Path>, records: &[BatchRecord]) -> Result<(), LlmError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| LlmError::Cache(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch_records(path: impl AsRef<Path>) -> Result<Vec<BatchRecord>, LlmError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| LlmError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Runs translation jobs against a backend, with caching and retries.
pub struct Pipeline<B> {
    backend: B,
    cache: ResponseCache,
    retry: RetryPolicy,
    params: GenerationParams,
    max_in_flight: usize,
    // Serializes concurrent misses on the same key so the backend sees it once.
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl<B: ChatBackend> Pipeline<B> {
    pub fn new(backend: B) -> Self {
        Self {
            backend,
            cache: ResponseCache::in_memory(),
            retry: RetryPolicy::default(),
            params: GenerationParams::default(),
            max_in_flight: 4,
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Cleaned completion for `prompt`, from the cache when possible.
    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let key = cache_key(&self.backend.identity(), prompt, &self.params);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let slot = self.in_flight.lock().unwrap().entry(key.clone()).or_default().clone();
        let _guard = slot.lock().unwrap();
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let out = self
            .call_with_retry(prompt)
            .map(|raw| clean_completion(&raw))
            .and_then(|value| self.cache.insert(&key, &value).map(|()| value));
        self.in_flight.lock().unwrap().remove(&key);
        out
    }

    fn call_with_retry(&self, prompt: &str) -> Result<String, LlmError> {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(prompt, &self.params) {
                Ok(s) => return Ok(s),
                Err(LlmError::Retryable(msg)) if attempt < max => {
                    let delay = self.retry.delay_after(attempt);
                    log::warn!("attempt {attempt}/{max} failed ({msg}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
                Err(e) => {
                    return Err(LlmError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    pub fn translate_direct(&self, job: &TranslationJob) -> Result<String, LlmError> {
        job.validate()?;
        if job.mode != JobMode::Direct {
            return Err(LlmError::Validation(format!("expected a direct job, got {}", job.mode.name())));
        }
        self.complete(&render_prompt(&job.source_language, &job.target_language, &job.source, &[])?)
    }

    pub fn translate_contextual(&self, job: &TranslationJob) -> Result<String, LlmError> {
        job.validate()?;
        let JobMode::Contextual { contexts } = &job.mode else {
            return Err(LlmError::Validation(format!("expected a contextual job, got {}", job.mode.name())));
        };
        self.complete(&render_prompt(&job.source_language, &job.target_language, &job.source, contexts)?)
    }

    /// Translates into each context language first, then uses those
    /// outputs unchanged as contexts for the final translation.
    pub fn translate_sequential(
        &self,
        source_language: &str,
        target_language: &str,
        source: &str,
        context_languages: &[String],
    ) -> Result<SequentialOutput, LlmError> {
        let job = TranslationJob {
            source_language: source_language.into(),
            target_language: target_language.into(),
            source: source.into(),
            mode: JobMode::Sequential {
                context_languages: context_languages.to_vec(),
            },
        };
        job.validate()?;
        let mut intermediates = Vec::with_capacity(context_languages.len());
        for lang in context_languages {
            let step = |e| LlmError::Step {
                step: format!("{source_language}->{lang} context"),
                source: Box::new(e),
            };
            let prompt = render_prompt(source_language, lang, source, &[]).map_err(step)?;
            let text = self.complete(&prompt).map_err(step)?;
            if text.trim().is_empty() {
                return Err(step(LlmError::Backend("empty completion".into())));
            }
            intermediates.push((lang.clone(), text));
        }
        let step = |e| LlmError::Step {
            step: format!("{source_language}->{target_language} final"),
            source: Box::new(e),
        };
        let prompt = render_prompt(source_language, target_language, source, &intermediates).map_err(step)?;
        let translation = self.complete(&prompt).map_err(step)?;
        Ok(SequentialOutput { translation, intermediates })
    }

    /// Dispatches on the job's mode.
    pub fn translate(&self, job: &TranslationJob) -> Result<BatchRecord, LlmError> {
        let (contexts, intermediates, translation) = match &job.mode {
            JobMode::Direct => (Vec::new(), Vec::new(), self.translate_direct(job)?),
            JobMode::Contextual { contexts } => (contexts.clone(), Vec::new(), self.translate_contextual(job)?),
            JobMode::Sequential { context_languages } => {
                let out = self.translate_sequential(&job.source_language, &job.target_language, &job.source, context_languages)?;
                (out.intermediates.clone(), out.intermediates, out.translation)
            }
        };
        Ok(BatchRecord {
            row: 0,
            mode: job.mode.name().to_string(),
            source_language: job.source_language.clone(),
            target_language: job.target_language.clone(),
            source: job.source.clone(),
            contexts,
            intermediates,
            translation,
        })
    }

    /// Translates every job with at most `max_in_flight` running at once.
    /// Results keep job order; `row` is the job index.
    pub fn run_batch(&self, jobs: &[TranslationJob]) -> Vec<Result<BatchRecord, LlmError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<BatchRecord, LlmError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.max_in_flight.min(jobs.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let out = self.translate(job).map(|mut r| {
                        r.row = i;
                        r
                    });
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every job visited"))
            .collect()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicUsize;

    use super::*;
    use crate::llm::{Behavior, MockBackend};

    fn pipe(b: Behavior) -> Pipeline<MockBackend> {
        Pipeline::new(MockBackend::new(b)).with_retry(RetryPolicy::immediate(3))
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn direct_returns_stripped_completion() {
        let p = pipe(Behavior::Constant("  X \n".into()));
        assert_eq!(p.translate_direct(&TranslationJob::direct("en", "pt", "Hello.")).unwrap(), "X");
    }

    #[test]
    fn second_identical_call_hits_cache() {
        let p = pipe(Behavior::Marker);
        let job = TranslationJob::direct("en", "pt", "Hello.");
        let a = p.translate_direct(&job).unwrap();
        let b = p.translate_direct(&job).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.backend().call_count(), 1);
    }

    #[test]
    fn retries_until_success() {
        let p = Pipeline::new(MockBackend::new(Behavior::Constant("ok".into())).failing_first(2))
            .with_retry(RetryPolicy::immediate(3));
        assert_eq!(p.translate_direct(&TranslationJob::direct("en", "pt", "a")).unwrap(), "ok");
        assert_eq!(p.backend().call_count(), 3);
    }

    #[test]
    fn exhausted_retries_report_attempts() {
        let p = Pipeline::new(MockBackend::new(Behavior::Constant("ok".into())).failing_first(5))
            .with_retry(RetryPolicy::immediate(3));
        let err = p.translate_direct(&TranslationJob::direct("en", "pt", "a")).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 3, .. }), "{err}");
        assert_eq!(p.backend().call_count(), 3);
        // Failures are not cached.
        assert!(p.cache().is_empty());
    }

    #[test]
    fn non_retryable_fails_at_once() {
        let p = pipe(Behavior::Canned(HashMap::new()));
        let err = p.translate_direct(&TranslationJob::direct("en", "pt", "a")).unwrap_err();
        assert_eq!(err.attempts(), Some(1));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let r = RetryPolicy {
            max_attempts: 10,
            initial_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        let d: Vec<u128> = (1..=5).map(|k| r.delay_after(k).as_millis()).collect();
        assert_eq!(d, [100, 200, 400, 500, 500]);
    }

    #[test]
    fn contextual_sees_all_contexts_in_order() {
        let p = pipe(Behavior::ContextLanguages);
        let job = TranslationJob::contextual("en", "pt", "Hi.", &[("fr", "Salut."), ("es", "Hola.")]);
        assert_eq!(p.translate_contextual(&job).unwrap(), "French+Spanish");
        let prompt = &p.backend().calls()[0];
        assert_eq!(prompt.matches(" CONTEXT ").count(), 2);
    }

    #[test]
    fn contextual_needs_contexts() {
        let p = pipe(Behavior::Echo);
        let job = TranslationJob::contextual("en", "pt", "Hi.", &[]);
        assert!(matches!(p.translate_contextual(&job), Err(LlmError::Validation(_))));
        assert!(matches!(p.translate_direct(&TranslationJob::direct("en", "pt", " ")), Err(LlmError::Validation(_))));
        assert_eq!(p.backend().call_count(), 0);
    }

    #[test]
    fn mode_mismatch_rejected() {
        let p = pipe(Behavior::Echo);
        let job = TranslationJob::contextual("en", "pt", "Hi.", &[("es", "Hola.")]);
        assert!(matches!(p.translate_direct(&job), Err(LlmError::Validation(_))));
    }

    #[test]
    fn sequential_intermediates_precede_final() {
        let p = pipe(Behavior::Marker);
        let out = p.translate_sequential("zh", "pt", "你好。", &strings(&["en", "es"])).unwrap();
        assert_eq!(
            out.intermediates,
            vec![
                ("en".to_string(), "T(你好。→English)".to_string()),
                ("es".to_string(), "T(你好。→Spanish)".to_string())
            ]
        );
        let calls = p.backend().calls();
        assert_eq!(calls.len(), 3);
        assert!(calls[0].ends_with("English TRANSLATION:"));
        assert!(calls[1].ends_with("Spanish TRANSLATION:"));
        // The final prompt is exactly the contextual prompt over the intermediates.
        assert_eq!(calls[2], render_prompt("zh", "pt", "你好。", &out.intermediates).unwrap());
        assert!(calls[2].contains("English CONTEXT 1: T(你好。→English)"));
        assert_eq!(out.translation, "T(你好。→Portuguese)");
    }

    #[test]
    fn sequential_is_cache_stable() {
        let p = pipe(Behavior::Marker);
        let a = p.translate_sequential("en", "pt", "x y", &strings(&["es"])).unwrap();
        let b = p.translate_sequential("en", "pt", "x y", &strings(&["es"])).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.backend().call_count(), 2);
        // A direct en->es job shares the intermediate's cache entry.
        p.translate_direct(&TranslationJob::direct("en", "es", "x y")).unwrap();
        assert_eq!(p.backend().call_count(), 2);
    }

    #[test]
    fn sequential_failure_names_step() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let backend = MockBackend::new(Behavior::Custom(Arc::new(move |prompt: &str| {
            c.fetch_add(1, Ordering::SeqCst);
            if prompt.ends_with("Spanish TRANSLATION:") {
                String::new()
            } else {
                "ok".into()
            }
        })));
        let p = Pipeline::new(backend).with_retry(RetryPolicy::immediate(1));
        let err = p.translate_sequential("en", "pt", "x", &strings(&["fr", "es"])).unwrap_err();
        match err {
            LlmError::Step { step, .. } => assert_eq!(step, "en->es context"),
            other => panic!("{other}"),
        }
        // The final call never happened.
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert!(matches!(
            p.translate_sequential("en", "pt", "x", &[]),
            Err(LlmError::Validation(_))
        ));
    }

    #[test]
    fn batch_keeps_order_and_dedupes() {
        let p = pipe(Behavior::Marker).with_max_in_flight(3);
        let mut jobs: Vec<TranslationJob> = (0..20).map(|i| TranslationJob::direct("en", "pt", &format!("s{i}"))).collect();
        jobs.extend((0..20).map(|i| TranslationJob::direct("en", "pt", &format!("s{i}"))));
        let out = p.run_batch(&jobs);
        for (i, r) in out.iter().enumerate() {
            let r = r.as_ref().unwrap();
            assert_eq!(r.row, i);
            assert_eq!(r.translation, format!("T(s{}→Portuguese)", i % 20));
        }
        assert_eq!(p.backend().call_count(), 20);
    }

    #[test]
    fn bounded_concurrency() {
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (l, pk) = (live.clone(), peak.clone());
        let backend = MockBackend::new(Behavior::Custom(Arc::new(move |_: &str| {
            let now = l.fetch_add(1, Ordering::SeqCst) + 1;
            pk.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            l.fetch_sub(1, Ordering::SeqCst);
            "x".into()
        })));
        let p = Pipeline::new(backend).with_max_in_flight(2);
        let jobs: Vec<_> = (0..12).map(|i| TranslationJob::direct("en", "pt", &format!("s{i}"))).collect();
        assert!(p.run_batch(&jobs).iter().all(Result::is_ok));
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn persistent_cache_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let job = TranslationJob::direct("en", "pt", "Hello.");
        let first = Pipeline::new(MockBackend::new(Behavior::Marker)).with_cache(ResponseCache::open(&path).unwrap());
        let a = first.translate_direct(&job).unwrap();
        drop(first);
        let second = Pipeline::new(MockBackend::new(Behavior::Marker)).with_cache(ResponseCache::open(&path).unwrap());
        assert_eq!(second.translate_direct(&job).unwrap(), a);
        assert_eq!(second.backend().call_count(), 0);
    }

    #[test]
    fn corpus_jobs_and_records() {
        let corpus = MultiParallelCorpus::new(
            "t",
            strings(&["en", "es", "pt"]),
            vec![strings(&["a", "b", "c"]), strings(&["d", "e", "f"])],
        )
        .unwrap();
        let jobs = jobs_from_corpus(&corpus, "en", "pt", JobKind::Contextual, &strings(&["es"])).unwrap();
        assert_eq!(jobs[1], TranslationJob::contextual("en", "pt", "d", &[("es", "e")]));
        assert!(jobs_from_corpus(&corpus, "en", "pt", JobKind::Contextual, &strings(&["fr"])).is_err());
        assert!(jobs_from_corpus(&corpus, "en", "pt", JobKind::Sequential, &[]).is_err());
        let seq = jobs_from_corpus(&corpus, "en", "pt", JobKind::Sequential, &strings(&["fr"])).unwrap();
        assert_eq!(seq[0], TranslationJob::sequential("en", "pt", "a", &["fr"]));

        let p = pipe(Behavior::Marker);
        let records: Vec<BatchRecord> = p.run_batch(&seq).into_iter().map(Result::unwrap).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        write_batch_records(&path, &records).unwrap();
        assert_eq!(read_batch_records(&path).unwrap(), records);
        assert_eq!(records[0].intermediates, vec![("fr".to_string(), "T(a→French)".to_string())]);
        assert_eq!("sequential".parse::<JobKind>().unwrap(), JobKind::Sequential);
    }

    #[test]
    fn job_serde_shape() {
        let job = TranslationJob::sequential("en", "pt", "a", &["es"]);
        let s = serde_json::to_string(&job).unwrap();
        assert_eq!(s, r#"{"source_language":"en","target_language":"pt","source":"a","mode":"sequential","context_languages":["es"]}"#);
        assert_eq!(serde_json::from_str::<TranslationJob>(&s).unwrap(), job);
    }
}
