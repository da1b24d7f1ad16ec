//! `multisrc` command line.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, spec, or input
//! files), 2 runtime failure (I/O, backend, decoding).

use std::fmt;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use multisrc::experiments::toy::{toy_data, ToyConfig};
use multisrc::experiments::{
    aggregate, render_table, run_experiment, DatasetGroup, ExperimentError, ExperimentSpec, RunOptions, RunResult,
    TableFormat,
};
use multisrc::fusion::{beam_search_fused, decode_baseline, BeamConfig, FusionError, FusionRequest};
use multisrc::llm::{
    Behavior, ChatBackend, GenerationParams, HttpBackend, JobKind, LlmError, MockBackend, Pipeline, TranslationJob,
};
use multisrc::metrics::{corpus_bleu, sentence_stats, MetricError};
use multisrc::model::{train, Checkpoint, ModelConfig, ModelError, TrainOptions, TranslationPair};
use multisrc::significance::{paired_bootstrap, significance_report, SignificanceError, DEFAULT_THRESHOLD};
use multisrc::synthdata::{load_corpus, save_corpus, DataError};
use multisrc::tokenizer::train_bpe;

const EXIT_HELP: &str = "Exit codes: 0 success, 1 validation error, 2 runtime failure.";

#[derive(Parser)]
#[command(name = "multisrc", version, about = "Multi-source translation toolkit", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cipher benchmark (clean train set, noisy test set).
    GenData(GenDataArgs),
    /// Train a BPE tokenizer and toy transformer on a multi-parallel TSV corpus.
    Train(TrainArgs),
    /// Translate one sentence with a checkpoint (nmt) or a chat backend (llm).
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Paired bootstrap test between two hypothesis files.
    Significance(SignificanceArgs),
    /// Run an experiment spec (TOML).
    Run(RunArgs),
    /// Render result tables from persisted runs.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output directory; receives train.tsv, test.tsv, test.clean.txt and cipher.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ToyConfig::default().concepts)]
    concepts: usize,
    #[arg(long, default_value_t = ToyConfig::default().train_rows)]
    train_rows: usize,
    #[arg(long, default_value_t = ToyConfig::default().test_rows)]
    test_rows: usize,
    /// Word dropout probability on the primary source of the test set.
    #[arg(long, default_value_t = ToyConfig::default().dropout)]
    dropout: f64,
    #[arg(long, default_value_t = ToyConfig::default().seed)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Multi-parallel TSV corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path (JSON, tokenizer included).
    #[arg(long)]
    out: PathBuf,
    /// Translation direction `src:tgt`; repeatable. Defaults to es:pt and en:pt.
    #[arg(long = "pair", value_parser = parse_pair)]
    pairs: Vec<TranslationPair>,
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long, default_value_t = ToyConfig::default().train.epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainOptions::default().learning_rate)]
    learning_rate: f32,
    #[arg(long, default_value_t = TrainOptions::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainOptions::default().holdout_fraction)]
    holdout: f64,
    /// Parameter initialisation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackArg {
    Nmt,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum MockArg {
    Marker,
    Echo,
    ContextLanguages,
}

#[derive(clap::Args)]
struct TranslateArgs {
    /// Sentence to translate.
    text: String,
    #[arg(long, value_enum, default_value = "nmt")]
    track: TrackArg,
    #[arg(long = "from")]
    source_language: String,
    #[arg(long = "to")]
    target_language: String,
    /// Context rendering `lang=text`; repeatable, in order.
    #[arg(long = "context", value_parser = parse_context)]
    contexts: Vec<(String, String)>,
    /// Print the full result as JSON.
    #[arg(long)]
    json: bool,

    /// nmt: checkpoint with a stored tokenizer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// nmt: weight of the primary source.
    #[arg(long, default_value_t = 1.0)]
    lambda0: f64,
    /// nmt: weight of each context, in order. Defaults to 1 for every context.
    #[arg(long = "lambda")]
    lambdas: Vec<f64>,
    #[arg(long, default_value_t = BeamConfig::default().beam_size)]
    beam: usize,
    #[arg(long, default_value_t = BeamConfig::default().max_len)]
    max_len: usize,
    /// Length normalisation exponent.
    #[arg(long, default_value_t = BeamConfig::default().alpha)]
    alpha: f64,

    /// llm: prompt mode. Contextual uses --context, sequential uses --via.
    #[arg(long, default_value = "direct", value_parser = parse_mode)]
    mode: JobKind,
    /// llm: intermediate language for sequential mode; repeatable.
    #[arg(long = "via")]
    via: Vec<String>,
    /// llm: `http` reads MULTISRC_LLM_ENDPOINT, MULTISRC_LLM_API_KEY and MULTISRC_LLM_MODEL.
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendArg,
    #[arg(long, value_enum, default_value = "marker")]
    mock: MockArg,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct SignificanceArgs {
    /// System A hypotheses.
    #[arg(long)]
    a: PathBuf,
    /// System B hypotheses.
    #[arg(long)]
    b: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = multisrc::significance::DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Keep the per-resample deltas in the JSON report.
    #[arg(long)]
    deltas: bool,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment spec (TOML).
    spec: PathBuf,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Discard any journal from an earlier attempt instead of resuming.
    #[arg(long)]
    fresh: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Tsv,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Run directories or result.json files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Averaged dataset group `name=corpus,corpus,...`; repeatable.
    #[arg(long = "group", value_parser = parse_group)]
    groups: Vec<DatasetGroup>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
}

fn parse_pair(s: &str) -> Result<TranslationPair, String> {
    match s.split_once(':') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok(TranslationPair::new(a, b)),
        _ => Err(format!("expected src:tgt, got {s:?}")),
    }
}

fn parse_context(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((lang, text)) if !lang.is_empty() => Ok((lang.to_string(), text.to_string())),
        _ => Err(format!("expected lang=text, got {s:?}")),
    }
}

fn parse_mode(s: &str) -> Result<JobKind, String> {
    s.parse().map_err(|e: LlmError| e.to_string())
}

fn parse_group(s: &str) -> Result<DatasetGroup, String> {
    let (name, members) = s.split_once('=').ok_or_else(|| format!("expected name=a,b,c, got {s:?}"))?;
    let members: Vec<String> = members.split(',').filter(|m| !m.is_empty()).map(str::to_string).collect();
    if name.is_empty() || members.is_empty() {
        return Err(format!("expected name=a,b,c, got {s:?}"));
    }
    Ok(DatasetGroup {
        name: name.to_string(),
        members,
    })
}

/// A failure with its exit code.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

fn io_failure(e: &std::io::Error, msg: String) -> Failure {
    // A missing input is the caller's mistake, not a runtime fault.
    if e.kind() == ErrorKind::NotFound {
        Failure::Validation(msg)
    } else {
        Failure::Runtime(msg)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Io(io) => io_failure(io, e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::Io(io) => io_failure(io, e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Config(m) => Failure::Validation(m),
            FusionError::Model(m) => m.into(),
            FusionError::Internal(m) => Failure::Runtime(m),
        }
    }
}

impl From<LlmError> for Failure {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Validation(_) | LlmError::Config(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Data(d) => d.into(),
            e if e.is_validation() => Failure::Validation(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<SignificanceError> for Failure {
    fn from(e: SignificanceError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Validation(msg.into()))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(&e, format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let cfg = ToyConfig {
        concepts: args.concepts,
        train_rows: args.train_rows,
        test_rows: args.test_rows,
        dropout: args.dropout,
        seed: args.seed,
        ..ToyConfig::default()
    };
    if !(0.0..1.0).contains(&cfg.dropout) {
        return invalid(format!("dropout {} must lie in [0, 1)", cfg.dropout));
    }
    let data = toy_data(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    save_corpus(&data.train.corpus, args.out.join("train.tsv"))?;
    save_corpus(&data.test.corpus, args.out.join("test.tsv"))?;
    let clean = data.test.clean.unwrap_or_default();
    write_file(&args.out.join("test.clean.txt"), &(clean.join("\n") + "\n"))?;
    write_file(&args.out.join("cipher.json"), &to_json(&data.cipher))?;
    println!(
        "wrote {} training rows and {} test rows to {}",
        data.train.corpus.len(),
        data.test.corpus.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), Failure> {
    let corpus = load_corpus(&args.corpus)?;
    let pairs = if args.pairs.is_empty() { ToyConfig::pairs().to_vec() } else { args.pairs };
    let tokenizer = train_bpe(&corpus, args.vocab_size)?;
    let opts = TrainOptions {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        holdout_fraction: args.holdout,
        ..TrainOptions::default()
    };
    let config = ModelConfig {
        seed: args.seed,
        ..ModelConfig::default()
    };
    let (model, report) = train(config, &corpus, &pairs, &tokenizer, &opts)?;
    Checkpoint::new(model).with_tokenizer(tokenizer).save(&args.out)?;
    println!("{}", to_json(&report));
    Ok(())
}

fn translate_nmt(args: &TranslateArgs) -> Result<serde_json::Value, Failure> {
    let Some(path) = &args.checkpoint else {
        return invalid("--checkpoint is required for the nmt track");
    };
    let ckpt = Checkpoint::load(path)?;
    let Some(bpe) = ckpt.tokenizer else {
        return invalid(format!("{} has no stored tokenizer", path.display()));
    };
    let beam = BeamConfig {
        beam_size: args.beam,
        max_len: args.max_len,
        alpha: args.alpha,
    };
    let contexts: Vec<(&str, &str)> = args.contexts.iter().map(|(l, t)| (t.as_str(), l.as_str())).collect();
    let mut req = FusionRequest::from_text(&bpe, (&args.text, &args.source_language), &contexts, &args.target_language)?;
    req.weights.lambda0 = args.lambda0;
    if !args.lambdas.is_empty() {
        if args.lambdas.len() != contexts.len() {
            return invalid(format!("{} weights for {} contexts", args.lambdas.len(), contexts.len()));
        }
        req.weights.lambdas = args.lambdas.clone();
    }
    let hyps = if contexts.is_empty() && args.lambda0 == 1.0 {
        decode_baseline(&ckpt.model, &req.primary, &args.target_language, &beam)?
    } else {
        beam_search_fused(&ckpt.model, &req, &beam)?
    };
    let best = hyps.first().ok_or_else(|| Failure::Runtime("decoder returned no hypotheses".into()))?;
    let translation = best.text(&bpe)?;
    Ok(serde_json::json!({
        "track": "nmt",
        "translation": translation,
        "score": best.score,
        "finished": best.finished,
        "weights": req.weights,
        "beam": beam,
    }))
}

fn translate_llm(args: &TranslateArgs) -> Result<serde_json::Value, Failure> {
    let backend: Box<dyn ChatBackend> = match args.backend {
        BackendArg::Http => Box::new(HttpBackend::from_env()?),
        BackendArg::Mock => Box::new(MockBackend::new(match args.mock {
            MockArg::Marker => Behavior::Marker,
            MockArg::Echo => Behavior::Echo,
            MockArg::ContextLanguages => Behavior::ContextLanguages,
        })),
    };
    let (src, tgt) = (args.source_language.as_str(), args.target_language.as_str());
    let job = match args.mode {
        JobKind::Direct => TranslationJob::direct(src, tgt, &args.text),
        JobKind::Contextual => {
            let ctx: Vec<(&str, &str)> = args.contexts.iter().map(|(l, t)| (l.as_str(), t.as_str())).collect();
            TranslationJob::contextual(src, tgt, &args.text, &ctx)
        }
        JobKind::Sequential => {
            let via: Vec<&str> = args.via.iter().map(String::as_str).collect();
            TranslationJob::sequential(src, tgt, &args.text, &via)
        }
    };
    let pipeline = Pipeline::new(backend).with_params(GenerationParams::default());
    let record = pipeline.translate(&job)?;
    Ok(serde_json::to_value(&record).expect("plain data serializes"))
}

fn translate_cmd(args: TranslateArgs) -> Result<(), Failure> {
    let value = match args.track {
        TrackArg::Nmt => translate_nmt(&args)?,
        TrackArg::Llm => translate_llm(&args)?,
    };
    if args.json {
        println!("{}", to_json(&value));
    } else {
        println!("{}", value["translation"].as_str().unwrap_or_default());
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let hyps = read_lines(&args.hyp)?;
    let refs = read_lines(&args.reference)?;
    let report = corpus_bleu(&hyps, &refs)?;
    if args.json {
        println!("{}", to_json(&report));
    } else {
        let p = report.precisions;
        println!(
            "BLEU = {:.2} {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3} ratio = {:.3} hyp_len = {} ref_len = {})",
            report.score,
            p[0],
            p[1],
            p[2],
            p[3],
            report.brevity_penalty,
            report.hyp_len as f64 / report.ref_len.max(1) as f64,
            report.hyp_len,
            report.ref_len
        );
    }
    Ok(())
}

fn significance(args: SignificanceArgs) -> Result<(), Failure> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return invalid(format!("threshold {} must lie in (0, 1)", args.threshold));
    }
    let refs = read_lines(&args.reference)?;
    let a = sentence_stats(&read_lines(&args.a)?, &refs)?;
    let b = sentence_stats(&read_lines(&args.b)?, &refs)?;
    let mut report = significance_report(paired_bootstrap(&a, &b, args.resamples, args.seed)?, args.threshold);
    if !args.deltas {
        report.result.deltas.clear();
    }
    println!("{}", serde_json::to_string(&report).expect("plain data serializes"));
    println!("{report}");
    Ok(())
}

fn run_cmd(args: RunArgs) -> Result<(), Failure> {
    let spec = ExperimentSpec::load(&args.spec)?;
    let opts = RunOptions {
        fresh: args.fresh,
        ..RunOptions::new(&args.out)
    };
    let result = run_experiment(&spec, &opts)?;
    let table = aggregate(std::slice::from_ref(&result), &spec.groups)?;
    print!("{}", render_table(&table, TableFormat::Markdown));
    for pair in &result.significance {
        println!("{} {} vs {}: {}", pair.corpus, pair.a, pair.b, pair.report);
    }
    println!("results in {}", args.out.join(&spec.name).display());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), Failure> {
    let results = args.runs.iter().map(RunResult::load).collect::<Result<Vec<_>, _>>()?;
    let table = aggregate(&results, &args.groups)?;
    let format = match args.format {
        FormatArg::Markdown => TableFormat::Markdown,
        FormatArg::Tsv => TableFormat::Tsv,
    };
    print!("{}", render_table(&table, format));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Significance(a) => significance(a),
        Command::Run(a) => run_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
