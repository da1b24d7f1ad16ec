//! Running one experiment.
//!
//! Layout of a run directory `{out}/{name}/`:
//!
//! * `config.toml`: the resolved spec.
//! * `journal.jsonl`: a header line with the config digest, then one line per
//!   translated sentence, appended as soon as it is done. A rerun with the same
//!   digest picks up where the journal stops.
//! * `outputs/{corpus}.{condition}.jsonl`: one record per row.
//! * `result.json`: the [`RunResult`], enough to re-render every table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{condition_name, config, BackendKind, ExperimentError, ExperimentSpec, MockKind, Track};
use crate::fusion::{beam_search_fused, FusionRequest, FusionWeights};
use crate::llm::{
    Behavior, ChatBackend, GenerationParams, HttpBackend, JobKind, MockBackend, Pipeline, ResponseCache, RetryPolicy,
    TranslationJob,
};
use crate::metrics::{corpus_bleu, sentence_stats, BleuReport};
use crate::model::{load_checkpoint, AnyModel, TranslationModel};
use crate::significance::{paired_bootstrap, significance_report, SignificanceReport, DEFAULT_THRESHOLD};
use crate::synthdata::{corpus_to_tsv, load_corpus, MultiParallelCorpus};
use crate::tokenizer::BpeModel;

pub const RESULT_FILE: &str = "result.json";
const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Parent of the run directory.
    pub out_dir: PathBuf,
    /// Discard an existing run directory instead of resuming it.
    pub fresh: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            fresh: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub corpus: String,
    pub condition: String,
    pub context_languages: Vec<String>,
    pub outputs: Vec<String>,
    /// Generated contexts per row (sequential LLM runs only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intermediates: Vec<Vec<(String, String)>>,
    /// Report per metric name.
    pub reports: BTreeMap<String, BleuReport>,
}

impl ConditionResult {
    pub fn score(&self, metric: &str) -> Option<f64> {
        self.reports.get(metric).map(|r| r.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub corpus: String,
    pub a: String,
    pub b: String,
    pub metric: String,
    pub report: SignificanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec_name: String,
    pub toolkit_version: String,
    pub config: ExperimentSpec,
    /// Corpus-major, context sets in spec order.
    pub conditions: Vec<ConditionResult>,
    pub significance: Vec<PairResult>,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn condition(&self, corpus: &str, condition: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.corpus == corpus && c.condition == condition)
    }

    pub fn corpora(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.conditions
            .iter()
            .map(|c| c.corpus.as_str())
            .filter(|c| seen.insert(*c))
            .collect()
    }

    /// Reads `result.json` from a run directory (or the file itself).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(RESULT_FILE);
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JournalHeader {
    config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JournalEntry {
    corpus: String,
    condition: String,
    row: usize,
    output: String,
    #[serde(default)]
    intermediates: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
struct OutputRecord<'a> {
    row: usize,
    source: &'a str,
    contexts: Vec<(&'a str, &'a str)>,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    intermediates: &'a [(String, String)],
    output: &'a str,
    reference: &'a str,
}

type Key = (String, String, usize);

struct Journal {
    file: Mutex<File>,
    done: HashMap<Key, (String, Vec<(String, String)>)>,
}

impl Journal {
    fn open(path: &Path, digest: &str) -> Result<Self, ExperimentError> {
        let mut done = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let mut lines = text.split_inclusive('\n').peekable();
            let header: Option<JournalHeader> = lines.next().and_then(|l| serde_json::from_str(l).ok());
            match header {
                Some(h) if h.config_digest == digest => {}
                Some(_) => {
                    return config(format!(
                        "{} belongs to a different configuration; remove it or run with --fresh",
                        path.display()
                    ))
                }
                None => return Err(ExperimentError::Journal(format!("{} has no header", path.display()))),
            }
            let mut valid = text.split_inclusive('\n').next().map_or(0, str::len);
            while let Some(line) = lines.next() {
                let last = lines.peek().is_none();
                match serde_json::from_str::<JournalEntry>(line) {
                    Ok(e) if line.ends_with('\n') || !last => {
                        done.insert((e.corpus, e.condition, e.row), (e.output, e.intermediates));
                    }
                    _ if last => break,
                    _ => return Err(ExperimentError::Journal(format!("corrupt line in {}", path.display()))),
                }
                valid += line.len();
            }
            let file = OpenOptions::new().append(true).open(path)?;
            file.set_len(valid as u64)?;
            log::info!("resuming from {} with {} finished sentences", path.display(), done.len());
            return Ok(Self {
                file: Mutex::new(file),
                done,
            });
        }
        let mut file = File::create(path)?;
        let header = JournalHeader {
            config_digest: digest.to_string(),
        };
        writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        Ok(Self {
            file: Mutex::new(file),
            done,
        })
    }

    fn append(&self, entry: &JournalEntry) -> Result<(), ExperimentError> {
        let mut line = serde_json::to_string(entry).map_err(|e| ExperimentError::Journal(e.to_string()))?;
        line.push('\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

enum Translator {
    Nmt { model: AnyModel, tokenizer: BpeModel },
    Llm { pipeline: Pipeline<Box<dyn ChatBackend>>, mode: JobKind },
}

struct RowOutput {
    output: String,
    intermediates: Vec<(String, String)>,
}

impl Translator {
    fn translate(
        &self,
        spec: &ExperimentSpec,
        corpus: &MultiParallelCorpus,
        set: usize,
        row: usize,
    ) -> Result<RowOutput, String> {
        let src_lang = spec.source_language.as_str();
        let tgt_lang = spec.target_language.as_str();
        let contexts = &spec.context_sets[set];
        let source = corpus.sentence(row, src_lang).expect("validated");
        match self {
            Translator::Nmt { model, tokenizer } => {
                let ctx: Vec<(&str, &str)> = contexts
                    .iter()
                    .map(|l| (corpus.sentence(row, l).expect("validated"), l.as_str()))
                    .collect();
                let weights = FusionWeights {
                    lambda0: spec.nmt.as_ref().expect("validated").lambda0,
                    lambdas: spec.lambdas(set),
                };
                let request = FusionRequest::from_text(tokenizer, (source, src_lang), &ctx, tgt_lang)
                    .map_err(|e| e.to_string())?
                    .with_weights(weights);
                let hyps = beam_search_fused(model, &request, &spec.beam).map_err(|e| e.to_string())?;
                let best = hyps.first().ok_or("beam search returned nothing")?;
                Ok(RowOutput {
                    output: best.text(tokenizer).map_err(|e| e.to_string())?,
                    intermediates: Vec::new(),
                })
            }
            Translator::Llm { pipeline, mode } => {
                let job = if contexts.is_empty() {
                    TranslationJob::direct(src_lang, tgt_lang, source)
                } else if *mode == JobKind::Sequential {
                    let langs: Vec<&str> = contexts.iter().map(String::as_str).collect();
                    TranslationJob::sequential(src_lang, tgt_lang, source, &langs)
                } else {
                    let ctx: Vec<(&str, &str)> = contexts
                        .iter()
                        .map(|l| (l.as_str(), corpus.sentence(row, l).expect("validated")))
                        .collect();
                    TranslationJob::contextual(src_lang, tgt_lang, source, &ctx)
                };
                let record = pipeline.translate(&job).map_err(|e| e.to_string())?;
                Ok(RowOutput {
                    output: record.translation,
                    intermediates: record.intermediates,
                })
            }
        }
    }
}

fn load_corpora(spec: &ExperimentSpec) -> Result<Vec<MultiParallelCorpus>, ExperimentError> {
    let mut corpora = Vec::new();
    let mut names = HashSet::new();
    for path in &spec.corpora {
        let c = load_corpus(path).map_err(|e| ExperimentError::Config(format!("corpus {}: {e}", path.display())))?;
        if c.is_empty() {
            return config(format!("corpus {} is empty", path.display()));
        }
        if !names.insert(c.name().to_string()) {
            return config(format!("two corpora are named {}", c.name()));
        }
        let mut needed = vec![&spec.source_language, &spec.target_language];
        let contexts_needed = match (&spec.track, &spec.llm) {
            (Track::Llm, Some(l)) => l.mode != JobKind::Sequential,
            _ => true,
        };
        if contexts_needed {
            needed.extend(spec.context_sets.iter().flatten());
        }
        for code in needed {
            if !c.has_language(code) {
                return config(format!("corpus {} has no {code:?} column", c.name()));
            }
        }
        corpora.push(c);
    }
    Ok(corpora)
}

fn build_translator(spec: &ExperimentSpec, corpora: &[MultiParallelCorpus]) -> Result<Translator, ExperimentError> {
    match spec.track {
        Track::Nmt => {
            let nmt = spec.nmt.as_ref().expect("validated");
            let ckpt = load_checkpoint(&nmt.checkpoint)
                .map_err(|e| ExperimentError::Config(format!("checkpoint {}: {e}", nmt.checkpoint.display())))?;
            let Some(tokenizer) = ckpt.tokenizer else {
                return config(format!("checkpoint {} has no tokenizer", nmt.checkpoint.display()));
            };
            let vocab = ckpt.model.vocab();
            let langs = [&spec.source_language, &spec.target_language]
                .into_iter()
                .chain(spec.context_sets.iter().flatten());
            for code in langs {
                if vocab.lang_tag(code).is_err() {
                    return config(format!("model has no {code:?} language tag"));
                }
            }
            Ok(Translator::Nmt {
                model: ckpt.model,
                tokenizer,
            })
        }
        Track::Llm => {
            let llm = spec.llm.as_ref().expect("validated");
            let backend: Box<dyn ChatBackend> = match llm.backend {
                BackendKind::Http => Box::new(HttpBackend::from_env().map_err(|e| ExperimentError::Config(e.to_string()))?),
                BackendKind::Mock => Box::new(MockBackend::new(match llm.mock {
                    MockKind::Marker => Behavior::Marker,
                    MockKind::Echo => Behavior::Echo,
                    MockKind::ContextLanguages => Behavior::ContextLanguages,
                    MockKind::Canned => Behavior::Canned(llm.canned.clone().into_iter().collect()),
                    MockKind::Reference => Behavior::Canned(
                        corpora
                            .iter()
                            .flat_map(|c| {
                                let src = c.column(&spec.source_language).expect("validated");
                                let tgt = c.column(&spec.target_language).expect("validated");
                                src.into_iter().zip(tgt).map(|(s, t)| (s.to_string(), t.to_string())).collect::<Vec<_>>()
                            })
                            .collect(),
                    ),
                })),
            };
            let cache = match &llm.cache {
                Some(p) => ResponseCache::open(p).map_err(|e| ExperimentError::Config(format!("cache {}: {e}", p.display())))?,
                None => ResponseCache::in_memory(),
            };
            let pipeline = Pipeline::new(backend)
                .with_cache(cache)
                .with_retry(RetryPolicy {
                    max_attempts: llm.max_attempts,
                    ..RetryPolicy::default()
                })
                .with_params(GenerationParams {
                    temperature: llm.temperature,
                    max_tokens: None,
                })
                .with_max_in_flight(llm.max_in_flight);
            Ok(Translator::Llm { pipeline, mode: llm.mode })
        }
    }
}

/// Digest of everything that affects translations.
fn config_digest(spec: &ExperimentSpec, corpora: &[MultiParallelCorpus]) -> Result<String, ExperimentError> {
    let mut h = Sha256::new();
    let material = serde_json::json!({
        "track": spec.track,
        "source": spec.source_language,
        "target": spec.target_language,
        "context_sets": spec.context_sets,
        "beam": spec.beam,
        "nmt": spec.nmt,
        "llm": spec.llm,
    });
    h.update(material.to_string().as_bytes());
    for c in corpora {
        h.update(c.name().as_bytes());
        h.update(corpus_to_tsv(c).as_bytes());
    }
    if let Some(n) = &spec.nmt {
        h.update(fs::read(&n.checkpoint)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn safe_file_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || "+-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Runs every condition of `spec`, scores it and writes the run directory.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunResult, ExperimentError> {
    let started = Instant::now();
    spec.validate()?;
    let corpora = load_corpora(spec)?;
    let translator = build_translator(spec, &corpora)?;
    let digest = config_digest(spec, &corpora)?;

    let run_dir = opts.out_dir.join(&spec.name);
    if opts.fresh && run_dir.exists() {
        fs::remove_dir_all(&run_dir)?;
    }
    fs::create_dir_all(run_dir.join("outputs"))?;
    fs::write(run_dir.join("config.toml"), spec.to_toml())?;
    let journal = Journal::open(&run_dir.join(JOURNAL_FILE), &digest)?;

    let mut conditions = Vec::new();
    for corpus in &corpora {
        for (set, contexts) in spec.context_sets.iter().enumerate() {
            let name = condition_name(contexts);
            let outputs = translate_condition(spec, &translator, &journal, corpus, set, &name)?;
            let (outputs, intermediates): (Vec<String>, Vec<Vec<(String, String)>>) = outputs.into_iter().unzip();
            let refs = corpus.column(&spec.target_language).expect("validated");
            let mut reports = BTreeMap::new();
            for m in &spec.metrics {
                // "bleu" is the only metric so far.
                reports.insert(m.clone(), corpus_bleu(&outputs, &refs)?);
            }
            write_outputs(&run_dir, spec, corpus, contexts, &name, &outputs, &intermediates)?;
            conditions.push(ConditionResult {
                corpus: corpus.name().to_string(),
                condition: name,
                context_languages: contexts.clone(),
                outputs,
                intermediates: if intermediates.iter().all(Vec::is_empty) { Vec::new() } else { intermediates },
                reports,
            });
        }
    }

    let mut significance = Vec::new();
    for corpus in &corpora {
        let refs = corpus.column(&spec.target_language).expect("validated");
        for (a, b) in &spec.significance {
            let find = |n: &str| {
                conditions
                    .iter()
                    .find(|c| c.corpus == corpus.name() && c.condition == n)
                    .expect("validated condition")
            };
            let sa = sentence_stats(&find(a).outputs, &refs)?;
            let sb = sentence_stats(&find(b).outputs, &refs)?;
            let res = paired_bootstrap(&sa, &sb, spec.resamples, spec.seed)?;
            significance.push(PairResult {
                corpus: corpus.name().to_string(),
                a: a.clone(),
                b: b.clone(),
                metric: "bleu".into(),
                report: significance_report(res, DEFAULT_THRESHOLD),
            });
        }
    }

    let result = RunResult {
        spec_name: spec.name.clone(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        config: spec.clone(),
        conditions,
        significance,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&result).map_err(|e| ExperimentError::Journal(e.to_string()))?;
    let tmp = run_dir.join(format!("{RESULT_FILE}.partial"));
    fs::write(&tmp, json)?;
    fs::rename(&tmp, run_dir.join(RESULT_FILE))?;
    Ok(result)
}

type Row = (String, Vec<(String, String)>);

fn translate_condition(
    spec: &ExperimentSpec,
    translator: &Translator,
    journal: &Journal,
    corpus: &MultiParallelCorpus,
    set: usize,
    name: &str,
) -> Result<Vec<Row>, ExperimentError> {
    let n = corpus.len();
    let slots: Vec<Mutex<Option<Row>>> = (0..n)
        .map(|row| {
            let key = (corpus.name().to_string(), name.to_string(), row);
            Mutex::new(journal.done.get(&key).cloned())
        })
        .collect();
    let pending: Vec<usize> = (0..n).filter(|&r| slots[r].lock().unwrap().is_none()).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Arc<Mutex<Option<ExperimentError>>> = Arc::default();
    let workers = spec.parallelism.min(pending.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                while !failed.load(Ordering::Relaxed) {
                    let Some(&row) = pending.get(next.fetch_add(1, Ordering::Relaxed)) else { break };
                    let res = translator
                        .translate(spec, corpus, set, row)
                        .map_err(|message| ExperimentError::Row {
                            corpus: corpus.name().to_string(),
                            condition: name.to_string(),
                            row,
                            message,
                        })
                        .and_then(|out| {
                            journal.append(&JournalEntry {
                                corpus: corpus.name().to_string(),
                                condition: name.to_string(),
                                row,
                                output: out.output.clone(),
                                intermediates: out.intermediates.clone(),
                            })?;
                            Ok(out)
                        });
                    match res {
                        Ok(out) => *slots[row].lock().unwrap() = Some((out.output, out.intermediates)),
                        Err(e) => {
                            failed.store(true, Ordering::Relaxed);
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.lock().unwrap().take() {
        return Err(e);
    }
    Ok(slots.into_iter().map(|s| s.into_inner().unwrap().expect("row translated")).collect())
}

fn write_outputs(
    run_dir: &Path,
    spec: &ExperimentSpec,
    corpus: &MultiParallelCorpus,
    contexts: &[String],
    name: &str,
    outputs: &[String],
    intermediates: &[Vec<(String, String)>],
) -> Result<(), ExperimentError> {
    let path = run_dir
        .join("outputs")
        .join(format!("{}.{}.jsonl", safe_file_name(corpus.name()), safe_file_name(name)));
    let mut w = BufWriter::new(File::create(path)?);
    let given_contexts = spec.llm.as_ref().is_none_or(|l| l.mode != JobKind::Sequential);
    for (row, output) in outputs.iter().enumerate() {
        let rec = OutputRecord {
            row,
            source: corpus.sentence(row, &spec.source_language).expect("validated"),
            contexts: if given_contexts {
                contexts
                    .iter()
                    .map(|l| (l.as_str(), corpus.sentence(row, l).expect("validated")))
                    .collect()
            } else {
                Vec::new()
            },
            intermediates: &intermediates[row],
            output,
            reference: corpus.sentence(row, &spec.target_language).expect("validated"),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| ExperimentError::Journal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
