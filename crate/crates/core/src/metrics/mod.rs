//! Corpus BLEU compatible with SacreBLEU's defaults (13a tokenization,
//! exponential smoothing, single reference, case-sensitive).

mod tok13a;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tok13a::tokenize_13a;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no sentences to score")]
    Empty,
}

/// Sufficient statistics for BLEU over any set of sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub hyp_len: u64,
    pub ref_len: u64,
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
}

impl Add for BleuStats {
    type Output = BleuStats;

    fn add(mut self, o: BleuStats) -> BleuStats {
        self += o;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: BleuStats) {
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
    }
}

impl std::iter::Sum for BleuStats {
    fn sum<I: Iterator<Item = BleuStats>>(iter: I) -> Self {
        iter.fold(BleuStats::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    /// Modified n-gram precisions in percent, after smoothing.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
}

fn ngram_counts(tokens: &[String], n: usize) -> std::collections::HashMap<&[String], u64> {
    let mut counts = std::collections::HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn from_pair(hypothesis: &str, reference: &str) -> Self {
        let h = tokenize_13a(hypothesis);
        let r = tokenize_13a(reference);
        let mut s = BleuStats {
            hyp_len: h.len() as u64,
            ref_len: r.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    /// Corpus-level BLEU over all orders.
    pub fn bleu(&self) -> BleuReport {
        self.compute(false)
    }

    /// BLEU with the order capped at the longest n-gram the hypothesis has,
    /// as used for sentence-level scores.
    pub fn bleu_effective_order(&self) -> BleuReport {
        self.compute(true)
    }

    fn compute(&self, effective_order: bool) -> BleuReport {
        let brevity_penalty = if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let mut precisions = [0.0; MAX_ORDER];
        let report = |score, precisions| BleuReport {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            matches: self.matches,
            totals: self.totals,
        };
        if self.matches.iter().all(|&m| m == 0) {
            return report(0.0, precisions);
        }
        let mut smooth = 1.0;
        let mut order = MAX_ORDER;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            if effective_order {
                order = n + 1;
            }
            precisions[n] = if self.matches[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.totals[n] as f64)
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            };
        }
        // A zero precision counts as a huge negative log, not -inf, so the
        // score is 0 without NaNs. Working with fractions keeps a perfect
        // match at exactly 100.
        let log = |p: f64| if p == 0.0 { -9_999_999_999.0 } else { (p / 100.0).ln() };
        let mean = precisions[..order].iter().map(|&p| log(p)).sum::<f64>() / order as f64;
        report(100.0 * brevity_penalty * mean.exp(), precisions)
    }
}

fn check_lengths(hyps: usize, refs: usize) -> Result<(), MetricError> {
    if hyps != refs {
        return Err(MetricError::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Per-sentence BLEU statistics; summing any multiset of them gives that multiset's corpus BLEU.
pub fn sentence_stats<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<Vec<BleuStats>, MetricError> {
    check_lengths(hypotheses.len(), references.len())?;
    Ok(hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| BleuStats::from_pair(h.as_ref(), r.as_ref()))
        .collect())
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuReport, MetricError> {
    Ok(sentence_stats(hypotheses, references)?.into_iter().sum::<BleuStats>().bleu())
}

/// Sentence-level BLEU (effective order) for every pair.
pub fn sentence_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<Vec<f64>, MetricError> {
    Ok(sentence_stats(hypotheses, references)?
        .iter()
        .map(|s| s.bleu_effective_order().score)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub sentences: Vec<f64>,
    pub corpus: f64,
}

/// A reference-based metric. Implementations must be deterministic.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, hypotheses: &[String], references: &[String]) -> Result<Scores, MetricError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BleuScorer;

impl Scorer for BleuScorer {
    fn name(&self) -> &str {
        "bleu"
    }

    fn score(&self, hypotheses: &[String], references: &[String]) -> Result<Scores, MetricError> {
        let stats = sentence_stats(hypotheses, references)?;
        Ok(Scores {
            sentences: stats.iter().map(|s| s.bleu_effective_order().score).collect(),
            corpus: stats.iter().copied().sum::<BleuStats>().bleu().score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HYPS: [&str; 3] = [
        "The cat sat on the mat.",
        "A quick brown fox jumps over a lazy dog!",
        "Casos do vírus Ebola, segundo relatórios.",
    ];
    const REFS: [&str; 3] = [
        "The cat is sitting on the mat.",
        "The quick brown fox jumped over the lazy dog.",
        "Casos do vírus Ebola foram relatados.",
    ];

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * (1.0 + b.abs())
    }

    // Reference values below were produced once by SacreBLEU 2.6.0.
    #[test]
    fn mini_corpus_matches_reference() {
        let r = corpus_bleu(&HYPS, &REFS).unwrap();
        assert!(close(r.score, 31.75434522932173), "{}", r.score);
        for (p, e) in r.precisions.iter().zip([68.0, 45.45454545454545, 26.31578947368421, 12.5]) {
            assert!(close(*p, e));
        }
        assert_eq!((r.hyp_len, r.ref_len), (25, 25));
        assert_eq!(r.matches, [17, 10, 5, 2]);
        assert_eq!(r.totals, [25, 22, 19, 16]);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn sentence_scores_match_reference() {
        let s = sentence_bleu(&HYPS, &REFS).unwrap();
        for (got, want) in s.iter().zip([42.38365628278778, 20.556680845025987, 36.55552228545123]) {
            assert!(close(*got, want), "{got} vs {want}");
        }
    }

    #[test]
    fn short_hypotheses_get_brevity_penalty() {
        let r = corpus_bleu(&["The cat sat.", "quick brown fox", "Casos do vírus Ebola."], &REFS).unwrap();
        assert!(close(r.score, 19.120821344965677), "{}", r.score);
        assert!(close(r.brevity_penalty, 0.33846542510674216));
        assert_eq!(r.matches, [11, 6, 3, 1]);
        assert_eq!(r.totals, [12, 9, 6, 3]);
    }

    #[test]
    fn zero_matches_are_smoothed() {
        let r = corpus_bleu(
            &["the cat sat in a big red mat", "a dog ran far"],
            &["the cat sat on the mat", "the dog ran away"],
        )
        .unwrap();
        assert!(close(r.score, 19.881768219176266), "{}", r.score);
        assert!(close(r.precisions[3], 8.333333333333334));
        assert_eq!(r.matches, [6, 3, 1, 0]);
    }

    #[test]
    fn missing_orders_score_zero() {
        let r = corpus_bleu(&["the cat", "dog a", "fox"], &["the cat sat", "a dog ran", "fox"]).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(close(r.brevity_penalty, 0.6703200460356393));
        let r = corpus_bleu(&["a b c", "x"], &["a b c d", "y z"]).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(close(r.brevity_penalty, 0.6065306597126334));
    }

    #[test]
    fn identical_is_100_and_empty_is_0() {
        let r = corpus_bleu(&REFS, &REFS).unwrap();
        assert_eq!(r.score, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
        let r = corpus_bleu(&["", "", ""], &REFS).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.brevity_penalty, 0.0);
    }

    #[test]
    fn validation_errors() {
        assert_eq!(corpus_bleu(&["a"], &["a", "b"]).unwrap_err(), MetricError::LengthMismatch { hyps: 1, refs: 2 });
        assert_eq!(corpus_bleu::<&str, &str>(&[], &[]).unwrap_err(), MetricError::Empty);
    }

    #[test]
    fn resampled_stats_match_duplicated_corpus() {
        let stats = sentence_stats(&HYPS[..2], &REFS[..2]).unwrap();
        let resampled: BleuStats = [0, 0, 1].iter().map(|&i| stats[i]).sum();
        let dup = corpus_bleu(&[HYPS[0], HYPS[0], HYPS[1]], &[REFS[0], REFS[0], REFS[1]]).unwrap();
        assert_eq!(resampled.bleu(), dup);
        let single = sentence_stats(&HYPS[..1], &REFS[..1]).unwrap();
        assert_eq!(single[0].bleu(), corpus_bleu(&HYPS[..1], &REFS[..1]).unwrap());
    }

    #[test]
    fn scorer_interface() {
        let hyps: Vec<String> = HYPS.iter().map(|s| s.to_string()).collect();
        let refs: Vec<String> = REFS.iter().map(|s| s.to_string()).collect();
        let s = BleuScorer.score(&hyps, &refs).unwrap();
        assert_eq!(s.corpus, corpus_bleu(&hyps, &refs).unwrap().score);
        assert_eq!(s.sentences, sentence_bleu(&hyps, &refs).unwrap());
        assert_eq!(BleuScorer.name(), "bleu");
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", ",", ".", "x1", "the"]), 0..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((sentence(), sentence()), 1..8), seed in any::<u64>()) {
            let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
            let mut idx: Vec<usize> = (0..h.len()).collect();
            crate::rng::PortableRng::seed(seed).shuffle(&mut idx);
            let hp: Vec<&String> = idx.iter().map(|&i| &h[i]).collect();
            let rp: Vec<&String> = idx.iter().map(|&i| &r[i]).collect();
            prop_assert_eq!(corpus_bleu(&h, &r).unwrap(), corpus_bleu(&hp, &rp).unwrap());
        }

        #[test]
        fn score_within_bounds(pairs in prop::collection::vec((sentence(), sentence()), 1..8)) {
            let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
            let rep = corpus_bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&rep.score));
            prop_assert!((0.0..=1.0).contains(&rep.brevity_penalty));
            if rep.precisions.iter().all(|&p| p > 0.0) {
                let geo = (rep.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
                prop_assert!((rep.score - rep.brevity_penalty * geo).abs() <= 1e-6);
            }
        }

        #[test]
        fn shortening_never_raises_bp(words in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 2..10), cut in 1usize..10) {
            let reference = words.join(" ");
            let keep = words.len().saturating_sub(cut).max(1).min(words.len() - 1);
            let shorter = words[..keep].join(" ");
            let shortest = words[..1].join(" ");
            let bp = |h: &str| corpus_bleu(&[h], &[reference.as_str()]).unwrap().brevity_penalty;
            prop_assert!(bp(&shorter) <= 1.0);
            prop_assert!(bp(&shortest) <= bp(&shorter));
        }
    }
}
