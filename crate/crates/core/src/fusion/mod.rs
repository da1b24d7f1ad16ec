//! Multi-source shallow fusion.
//!
//! At every decoding step the next-token log-probabilities of one model,
//! queried once per input (the primary source and each context rendering),
//! are combined as a weighted sum:
//!
//! ```text
//! fused[v] = λ₀·log P(v | x, y<t) + Σᵢ λᵢ·log P(v | zᵢ, y<t)
//! ```
//!
//! Summing the per-step contributions along a hypothesis gives its total
//! score. Beam search ranks hypotheses by `score / len^α`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TranslationModel};
use crate::tokenizer::{BpeModel, TokenSeq};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda0: f64,
    pub lambdas: Vec<f64>,
}

impl FusionWeights {
    /// All weights 1.
    pub fn equal(contexts: usize) -> Self {
        Self {
            lambda0: 1.0,
            lambdas: vec![1.0; contexts],
        }
    }

    fn validate(&self, contexts: usize) -> Result<(), FusionError> {
        if self.lambdas.len() != contexts {
            return Err(FusionError::Config(format!(
                "{} context weights for {contexts} contexts",
                self.lambdas.len()
            )));
        }
        if !self.lambda0.is_finite() || self.lambdas.iter().any(|l| !l.is_finite()) {
            return Err(FusionError::Config("fusion weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRequest {
    pub primary: TokenSeq,
    pub contexts: Vec<TokenSeq>,
    pub weights: FusionWeights,
    pub target_language: String,
}

impl FusionRequest {
    /// Request with equal weights.
    pub fn new(primary: TokenSeq, contexts: Vec<TokenSeq>, target_language: impl Into<String>) -> Self {
        let weights = FusionWeights::equal(contexts.len());
        Self {
            primary,
            contexts,
            weights,
            target_language: target_language.into(),
        }
    }

    pub fn with_weights(mut self, weights: FusionWeights) -> Self {
        self.weights = weights;
        self
    }

    /// Encodes `(text, language)` inputs with `bpe`.
    pub fn from_text(
        bpe: &BpeModel,
        primary: (&str, &str),
        contexts: &[(&str, &str)],
        target_language: &str,
    ) -> Result<Self, FusionError> {
        let primary = bpe.encode(primary.0, primary.1)?;
        let contexts = contexts
            .iter()
            .map(|&(text, lang)| bpe.encode(text, lang))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(primary, contexts, target_language))
    }

    /// `(sequence, weight)` for the primary input followed by every context.
    fn inputs(&self) -> impl Iterator<Item = (&TokenSeq, f64)> {
        std::iter::once((&self.primary, self.weights.lambda0)).chain(self.contexts.iter().zip(self.weights.lambdas.iter().copied()))
    }

    fn validate<M: TranslationModel + ?Sized>(&self, model: &M) -> Result<u32, FusionError> {
        self.weights.validate(self.contexts.len())?;
        let vocab = model.vocab();
        let tag = vocab.lang_tag(&self.target_language)?;
        for (seq, _) in self.inputs() {
            seq.validate(vocab)?;
            match seq.first() {
                Some(&id) if vocab.is_lang_tag(id) => {}
                _ => return Err(ModelError::Vocab("every input must begin with its language tag".into()).into()),
            }
        }
        Ok(tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS when finished; excludes BOS and the target tag.
    pub tokens: TokenSeq,
    pub score: f64,
    pub step_scores: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.score
        } else {
            self.score / (self.tokens.len() as f64).powf(alpha)
        }
    }

    pub fn text(&self, bpe: &BpeModel) -> Result<String, ModelError> {
        bpe.decode(&self.tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Generated tokens per hypothesis, EOS included. Also capped by the
    /// model's `max_seq_len - 1`.
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 48,
            alpha: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn greedy() -> Self {
        Self {
            beam_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(FusionError::Config("beam size and max length must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(FusionError::Config(format!("length exponent {} must be finite and ≥ 0", self.alpha)));
        }
        Ok(())
    }
}

/// Fused score vector for the token following `prefix` (which starts with BOS and the target tag).
pub fn fused_step_logprobs<M: TranslationModel + ?Sized>(
    model: &M,
    request: &FusionRequest,
    prefix: &TokenSeq,
) -> Result<Vec<f64>, FusionError> {
    let tag = request.validate(model)?;
    let vocab = model.vocab();
    if prefix.len() < 2 || prefix[0] != vocab.bos() || prefix[1] != tag {
        return Err(ModelError::Input("prefix must begin with BOS and the target-language tag".into()).into());
    }
    fused_unchecked(model, request, prefix)
}

fn fused_unchecked<M: TranslationModel + ?Sized>(
    model: &M,
    request: &FusionRequest,
    prefix: &TokenSeq,
) -> Result<Vec<f64>, FusionError> {
    let v = model.vocab().len();
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(1 + request.contexts.len());
    for (seq, lambda) in request.inputs() {
        // Zero-weight inputs are skipped so 0·(-inf) never appears.
        if lambda == 0.0 {
            continue;
        }
        let lp = model.next_token_logprobs(seq, prefix)?;
        if lp.len() != v {
            return Err(FusionError::Internal(format!(
                "model returned {} log-probabilities for a vocabulary of {v}",
                lp.len()
            )));
        }
        terms.push(lp.iter().map(|&l| lambda * l as f64).collect());
    }
    match terms.len() {
        0 => Ok(vec![0.0; v]),
        1 => Ok(terms.pop().expect("one term")),
        _ => {
            // Adding the terms in sorted order makes the result independent
            // of the order in which contexts were given.
            let mut buf = Vec::with_capacity(terms.len());
            Ok((0..v)
                .map(|i| {
                    buf.clear();
                    buf.extend(terms.iter().map(|t| t[i]));
                    buf.sort_by(f64::total_cmp);
                    buf.iter().sum()
                })
                .collect())
        }
    }
}

/// Ranking: higher normalized score first, then the lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.normalized_score(alpha)
        .total_cmp(&a.normalized_score(alpha))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over fused scores. Returns up to `beam_size` hypotheses, best first.
pub fn beam_search_fused<M: TranslationModel + ?Sized>(
    model: &M,
    request: &FusionRequest,
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>, FusionError> {
    beam.validate()?;
    let tag = request.validate(model)?;
    let vocab = model.vocab();
    if vocab.len() <= vocab.first_regular() as usize {
        return Err(FusionError::Internal("vocabulary has no generatable tokens".into()));
    }
    let eos = vocab.eos();
    // PAD, BOS and language tags are never generated.
    let allowed: Vec<u32> = (0..vocab.len() as u32)
        .filter(|&id| id == eos || id == vocab.unk() || id >= vocab.first_regular())
        .collect();
    let max_len = beam.max_len.min(model.max_seq_len().saturating_sub(1)).max(1);
    let k = beam.beam_size;

    let mut hyps = vec![Hypothesis {
        tokens: TokenSeq::new(),
        score: 0.0,
        step_scores: Vec::new(),
        finished: false,
    }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::with_capacity(k * k);
        for h in hyps {
            if h.finished {
                candidates.push(h);
                continue;
            }
            let prefix: TokenSeq = [vocab.bos(), tag].iter().chain(h.tokens.iter()).copied().collect();
            let scores = fused_unchecked(model, request, &prefix)?;
            // Only the k best extensions of one hypothesis can survive pruning.
            let mut ext: Vec<u32> = allowed.clone();
            let by_score = |a: &u32, b: &u32| scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b));
            if ext.len() > k {
                ext.select_nth_unstable_by(k - 1, by_score);
                ext.truncate(k);
            }
            for v in ext {
                let s = scores[v as usize];
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                let mut step_scores = h.step_scores.clone();
                step_scores.push(s);
                candidates.push(Hypothesis {
                    tokens,
                    score: h.score + s,
                    step_scores,
                    finished: v == eos,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, beam.alpha));
        candidates.truncate(k);
        hyps = candidates;
    }
    hyps.sort_by(|a, b| rank(a, b, beam.alpha));
    Ok(hyps)
}

/// Single-source decoding: fused search with no contexts and λ₀ = 1.
pub fn decode_baseline<M: TranslationModel + ?Sized>(
    model: &M,
    source: &TokenSeq,
    target_language: &str,
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>, FusionError> {
    let request = FusionRequest::new(source.clone(), Vec::new(), target_language);
    beam_search_fused(model, &request, beam)
}
