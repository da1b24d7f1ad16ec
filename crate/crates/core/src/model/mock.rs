use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{check_query, log_sum_exp, ModelError, TranslationModel, Vocab};
use crate::tokenizer::TokenSeq;

const NORMALIZATION_TOL: f64 = 1e-6;

/// Explicit `(source, prefix) → log-distribution` table with a uniform fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MockRepr", into = "MockRepr")]
pub struct MockTableModel {
    vocab: Vocab,
    max_seq_len: usize,
    table: HashMap<(TokenSeq, TokenSeq), Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct MockRepr {
    vocab: Vocab,
    max_seq_len: usize,
    entries: Vec<MockEntry>,
}

#[derive(Serialize, Deserialize)]
struct MockEntry {
    source: TokenSeq,
    prefix: TokenSeq,
    #[serde(with = "super::f32_codec")]
    logprobs: Vec<f32>,
}

impl From<MockTableModel> for MockRepr {
    fn from(m: MockTableModel) -> Self {
        let mut entries: Vec<MockEntry> = m
            .table
            .into_iter()
            .map(|((source, prefix), logprobs)| MockEntry {
                source,
                prefix,
                logprobs,
            })
            .collect();
        entries.sort_by(|a, b| (&a.source, &a.prefix).cmp(&(&b.source, &b.prefix)));
        MockRepr {
            vocab: m.vocab,
            max_seq_len: m.max_seq_len,
            entries,
        }
    }
}

impl TryFrom<MockRepr> for MockTableModel {
    type Error = ModelError;

    fn try_from(r: MockRepr) -> Result<Self, ModelError> {
        let mut m = MockTableModel::new(r.vocab, r.max_seq_len);
        for e in r.entries {
            m.insert(e.source, e.prefix, e.logprobs)?;
        }
        Ok(m)
    }
}

impl MockTableModel {
    pub fn new(vocab: Vocab, max_seq_len: usize) -> Self {
        Self {
            vocab,
            max_seq_len,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, source: TokenSeq, prefix: TokenSeq, logprobs: Vec<f32>) -> Result<(), ModelError> {
        if logprobs.len() != self.vocab.len() {
            return Err(ModelError::Input(format!(
                "log-probability vector has {} entries, vocabulary has {}",
                logprobs.len(),
                self.vocab.len()
            )));
        }
        let lse = log_sum_exp(&logprobs);
        if !(lse.abs() <= NORMALIZATION_TOL) {
            return Err(ModelError::Input(format!("not a log-distribution: log-sum-exp = {lse}")));
        }
        self.table.insert((source, prefix), logprobs);
        Ok(())
    }

    /// Stores a distribution where the listed tokens get exactly the given
    /// log-probabilities and the remaining mass is spread evenly.
    pub fn insert_pinned(&mut self, source: TokenSeq, prefix: TokenSeq, pinned: &[(u32, f32)]) -> Result<(), ModelError> {
        let v = self.vocab.len();
        let mut out = vec![f32::NAN; v];
        let mut mass = 0.0f64;
        for &(id, lp) in pinned {
            let slot = out
                .get_mut(id as usize)
                .ok_or_else(|| ModelError::Vocab(format!("token id {id} out of range")))?;
            *slot = lp;
            mass += (lp as f64).exp();
        }
        let free = out.iter().filter(|x| x.is_nan()).count();
        let rest = 1.0 - mass;
        if free > 0 {
            if rest <= 0.0 {
                return Err(ModelError::Input("pinned probabilities leave no mass for other tokens".into()));
            }
            let each = (rest / free as f64).ln() as f32;
            out.iter_mut().filter(|x| x.is_nan()).for_each(|x| *x = each);
        }
        self.insert(source, prefix, out)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(TokenSeq, TokenSeq), &Vec<f32>)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TranslationModel for MockTableModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn next_token_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f32>, ModelError> {
        check_query(&self.vocab, self.max_seq_len, source, prefix)?;
        if let Some(v) = self.table.get(&(source.clone(), prefix.clone())) {
            return Ok(v.clone());
        }
        let uniform = -(self.vocab.len() as f32).ln();
        Ok(vec![uniform; self.vocab.len()])
    }
}
