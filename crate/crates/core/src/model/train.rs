use log::info;
use serde::{Deserialize, Serialize};

use super::tensor::{log_softmax_row, Matrix, Tape};
use super::{ModelConfig, ModelError, Transformer, TranslationModel};
use crate::synthdata::MultiParallelCorpus;
use crate::rng::PortableRng;
use crate::tokenizer::BpeModel;

/// A training direction, e.g. `es → pt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub source: String,
    pub target: String,
}

impl TranslationPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
    /// Fraction of corpus rows (taken from the end) held out for accuracy.
    pub holdout_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 16,
            clip_norm: Some(1.0),
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_examples: usize,
    pub heldout_examples: usize,
    /// Teacher-forced token accuracy on held-out rows (`None` without a holdout).
    pub heldout_token_accuracy: Option<f64>,
}

/// One teacher-forcing example: decoder input `[BOS, tag, y₁..yₙ]` predicts
/// `[y₁..yₙ, EOS]` from position 1 on.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub source: Vec<u32>,
    pub decoder_input: Vec<u32>,
    pub targets: Vec<u32>,
}

pub(crate) fn build_examples(
    corpus: &MultiParallelCorpus,
    rows: std::ops::Range<usize>,
    pairs: &[TranslationPair],
    tokenizer: &BpeModel,
    max_len: usize,
) -> Result<Vec<Example>, ModelError> {
    let vocab = tokenizer.vocab();
    let mut out = Vec::new();
    for row in rows {
        for pair in pairs {
            let src_text = corpus.sentence(row, &pair.source).expect("language checked");
            let tgt_text = corpus.sentence(row, &pair.target).expect("language checked");
            let source = tokenizer.encode(src_text, &pair.source)?;
            let target = tokenizer.encode(tgt_text, &pair.target)?;
            let mut decoder_input = vec![vocab.bos()];
            decoder_input.extend_from_slice(&target);
            let mut targets = target[1..].to_vec();
            targets.push(vocab.eos());
            if source.len() > max_len || decoder_input.len() > max_len {
                return Err(ModelError::Length {
                    len: source.len().max(decoder_input.len()),
                    max: max_len,
                });
            }
            out.push(Example {
                source: source.into_inner(),
                decoder_input,
                targets,
            });
        }
    }
    Ok(out)
}

/// Runs forward + backward for one example; returns (summed loss, token count).
fn accumulate_example(model: &Transformer, ex: &Example, grads: &mut [Matrix]) -> (f64, usize) {
    let mut tape = Tape::new(model.params());
    let logits = model.forward(&mut tape, &ex.source, &ex.decoder_input);
    let lv = tape.value(logits);
    let mut seed = Matrix::zeros(lv.rows, lv.cols);
    let mut loss = 0.0f64;
    for (k, &target) in ex.targets.iter().enumerate() {
        let pos = k + 1;
        let lp = log_softmax_row(lv.row(pos));
        loss -= lp[target as usize] as f64;
        let g = seed.row_mut(pos);
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = l.exp();
        }
        g[target as usize] -= 1.0;
    }
    tape.backward(logits, seed, grads);
    (loss, ex.targets.len())
}

fn check_languages(corpus: &MultiParallelCorpus, pairs: &[TranslationPair], tokenizer: &BpeModel) -> Result<(), ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Data("empty corpus".into()));
    }
    if pairs.is_empty() {
        return Err(ModelError::Data("no translation pairs given".into()));
    }
    for p in pairs {
        for code in [&p.source, &p.target] {
            if !corpus.has_language(code) {
                return Err(ModelError::Data(format!("language {code:?} absent from corpus")));
            }
            tokenizer.vocab().lang_tag(code)?;
        }
    }
    Ok(())
}

/// Trains a fresh [`Transformer`] with token-level cross-entropy, teacher
/// forcing and fixed-rate minibatch SGD. Deterministic given `config.seed`.
pub fn train(
    config: ModelConfig,
    corpus: &MultiParallelCorpus,
    pairs: &[TranslationPair],
    tokenizer: &BpeModel,
    opts: &TrainOptions,
) -> Result<(Transformer, TrainReport), ModelError> {
    config.validate()?;
    check_languages(corpus, pairs, tokenizer)?;
    if !(opts.learning_rate > 0.0) || opts.batch_size == 0 {
        return Err(ModelError::Config("learning rate and batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(ModelError::Config("holdout fraction must lie in [0, 1)".into()));
    }
    let n = corpus.len();
    let held = if opts.holdout_fraction > 0.0 {
        ((n as f64 * opts.holdout_fraction).ceil() as usize).min(n - 1)
    } else {
        0
    };
    let max_len = config.max_seq_len;
    let train_set = build_examples(corpus, 0..n - held, pairs, tokenizer, max_len)?;
    let heldout = build_examples(corpus, n - held..n, pairs, tokenizer, max_len)?;
    if train_set.is_empty() {
        return Err(ModelError::Data("no training rows after holdout".into()));
    }

    let seed = config.seed;
    let mut model = Transformer::new(config, tokenizer.vocab().clone())?;
    let mut grads: Vec<Matrix> = model.params().iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = PortableRng::stream(seed, 1);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(opts.batch_size) {
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let mut tokens = 0usize;
            for &i in batch {
                let (l, t) = accumulate_example(&model, &train_set[i], &mut grads);
                epoch_loss += l;
                tokens += t;
            }
            epoch_tokens += tokens;
            let inv = 1.0 / tokens.max(1) as f32;
            let norm = (grads.iter().map(Matrix::sq_norm).sum::<f64>()).sqrt() as f32 * inv;
            let clip = match opts.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let step = opts.learning_rate * inv * clip;
            for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                for (w, d) in p.data.iter_mut().zip(&g.data) {
                    *w -= step * d;
                }
            }
        }
        let mean = epoch_loss / epoch_tokens.max(1) as f64;
        info!("epoch {}: mean token loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }

    let heldout_token_accuracy = if heldout.is_empty() {
        None
    } else {
        Some(example_accuracy(&model, &heldout))
    };
    let report = TrainReport {
        epoch_losses,
        train_examples: train_set.len(),
        heldout_examples: heldout.len(),
        heldout_token_accuracy,
    };
    Ok((model, report))
}

fn example_accuracy(model: &Transformer, examples: &[Example]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let mut tape = Tape::new(model.params());
        let logits = model.forward(&mut tape, &ex.source, &ex.decoder_input);
        let lv = tape.value(logits);
        for (k, &target) in ex.targets.iter().enumerate() {
            let row = lv.row(k + 1);
            let best = argmax(row);
            correct += usize::from(best == target as usize);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced next-token accuracy of `model` on the given corpus rows.
pub fn token_accuracy(
    model: &Transformer,
    corpus: &MultiParallelCorpus,
    rows: std::ops::Range<usize>,
    pairs: &[TranslationPair],
    tokenizer: &BpeModel,
) -> Result<f64, ModelError> {
    check_languages(corpus, pairs, tokenizer)?;
    let examples = build_examples(corpus, rows, pairs, tokenizer, model.max_seq_len())?;
    Ok(example_accuracy(model, &examples))
}
