//! Paired bootstrap resampling.
//!
//! Resample index sets are drawn up front from one [`PortableRng`] stream
//! (`N` rows of `n` draws, `below(n)` each) and the same rows drive both
//! systems. The test is one-sided in the direction of the observed
//! difference: with the leading system `L`,
//!
//! ```text
//! p = (#{resamples where L does not score strictly higher} + 1) / (N + 1)
//! ```
//!
//! so identical systems get p = 1 and a system that wins every resample
//! gets the minimum 1/(N + 1).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::BleuStats;
use crate::rng::PortableRng;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MIN_RESAMPLES: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum SignificanceError {
    #[error("systems have {a} and {b} sentences")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 2 sentences, got {0}")]
    TooFewSentences(usize),
    #[error("need at least {MIN_RESAMPLES} resamples, got {0}")]
    TooFewResamples(usize),
}

/// Per-sentence statistics from which a corpus score can be recomputed for any resample.
pub trait ResampleStat: Copy + Send + Sync {
    fn corpus_score(items: impl Iterator<Item = Self>) -> f64;
}

impl ResampleStat for BleuStats {
    fn corpus_score(items: impl Iterator<Item = Self>) -> f64 {
        items.sum::<BleuStats>().bleu().score
    }
}

/// Plain sentence-level scores, averaged.
impl ResampleStat for f64 {
    fn corpus_score(items: impl Iterator<Item = Self>) -> f64 {
        let (sum, n) = items.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        sum / n.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leader {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub num_resamples: usize,
    /// Score of A minus score of B on the full set.
    pub observed_delta: f64,
    pub score_a: f64,
    pub score_b: f64,
    /// Resamples where A scored strictly higher than B.
    pub wins_a: usize,
    /// Resamples where B scored strictly higher than A.
    pub wins_b: usize,
    /// The system the one-sided test is run for (A on a tie).
    pub leader: Leader,
    pub seed: u64,
    /// A − B on every resample, in draw order.
    pub deltas: Vec<f64>,
}

/// The index rows used by [`paired_bootstrap`] for the given size and seed.
pub fn resample_indices(n: usize, num_resamples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = PortableRng::seed(seed);
    (0..num_resamples).map(|_| (0..n).map(|_| rng.below(n)).collect()).collect()
}

pub fn paired_bootstrap<T: ResampleStat>(
    stats_a: &[T],
    stats_b: &[T],
    num_resamples: usize,
    seed: u64,
) -> Result<SignificanceResult, SignificanceError> {
    let n = stats_a.len();
    if n != stats_b.len() {
        return Err(SignificanceError::LengthMismatch { a: n, b: stats_b.len() });
    }
    if n < 2 {
        return Err(SignificanceError::TooFewSentences(n));
    }
    if num_resamples < MIN_RESAMPLES {
        return Err(SignificanceError::TooFewResamples(num_resamples));
    }
    let score_a = T::corpus_score(stats_a.iter().copied());
    let score_b = T::corpus_score(stats_b.iter().copied());
    let observed_delta = score_a - score_b;
    let leader = if observed_delta >= 0.0 { Leader::A } else { Leader::B };

    let mut deltas = Vec::with_capacity(num_resamples);
    let (mut wins_a, mut wins_b) = (0, 0);
    for idx in resample_indices(n, num_resamples, seed) {
        let a = T::corpus_score(idx.iter().map(|&i| stats_a[i]));
        let b = T::corpus_score(idx.iter().map(|&i| stats_b[i]));
        wins_a += usize::from(a > b);
        wins_b += usize::from(b > a);
        deltas.push(a - b);
    }
    let leader_wins = match leader {
        Leader::A => wins_a,
        Leader::B => wins_b,
    };
    let p_value = (num_resamples - leader_wins + 1) as f64 / (num_resamples + 1) as f64;
    Ok(SignificanceResult {
        p_value,
        num_resamples,
        observed_delta,
        score_a,
        score_b,
        wins_a,
        wins_b,
        leader,
        seed,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    #[serde(flatten)]
    pub result: SignificanceResult,
    pub threshold: f64,
    pub significant: bool,
}

/// Labels a result: significant iff `p_value < threshold`.
pub fn significance_report(result: SignificanceResult, threshold: f64) -> SignificanceReport {
    SignificanceReport {
        significant: result.p_value < threshold,
        threshold,
        result,
    }
}

impl fmt::Display for SignificanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.result;
        let verdict = if self.significant { "significant" } else { "not significant" };
        let who = match r.leader {
            Leader::A => "A",
            Leader::B => "B",
        };
        write!(
            f,
            "{verdict}: A {:.2} vs B {:.2} (delta {:+.2}, {who} leads), p = {:.4} at threshold {} over {} resamples",
            r.score_a, r.score_b, r.observed_delta, r.p_value, self.threshold, r.num_resamples
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sentence_stats;
    use proptest::prelude::*;

    fn stats(hyps: &[&str], refs: &[&str]) -> Vec<BleuStats> {
        sentence_stats(hyps, refs).unwrap()
    }

    fn refs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("sentence number {i} has some words in it")).collect()
    }

    #[test]
    fn self_comparison_never_significant() {
        let r = refs(20);
        let r: Vec<&str> = r.iter().map(String::as_str).collect();
        let hyps: Vec<String> = r.iter().map(|s| s.replace("some", "few")).collect();
        let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
        let s = stats(&h, &r);
        let res = paired_bootstrap(&s, &s, 1000, 7).unwrap();
        assert_eq!(res.observed_delta, 0.0);
        assert_eq!(res.p_value, 1.0);
        assert!(res.deltas.iter().all(|&d| d == 0.0));
        assert!(!significance_report(res, 0.05).significant);
    }

    #[test]
    fn deterministic_given_seed() {
        let r = refs(15);
        let r: Vec<&str> = r.iter().map(String::as_str).collect();
        let a: Vec<String> = r.iter().enumerate().map(|(i, s)| if i % 3 == 0 { s.to_string() } else { s.replace("words", "tokens") }).collect();
        let b: Vec<String> = r.iter().enumerate().map(|(i, s)| if i % 2 == 0 { s.to_string() } else { s.replace("has", "had") }).collect();
        let sa = stats(&a.iter().map(String::as_str).collect::<Vec<_>>(), &r);
        let sb = stats(&b.iter().map(String::as_str).collect::<Vec<_>>(), &r);
        let x = paired_bootstrap(&sa, &sb, 500, 42).unwrap();
        let y = paired_bootstrap(&sa, &sb, 500, 42).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.deltas.iter().map(|d| d.to_bits()).collect::<Vec<_>>(), y.deltas.iter().map(|d| d.to_bits()).collect::<Vec<_>>());
        let z = paired_bootstrap(&sa, &sb, 500, 43).unwrap();
        assert_ne!(x.deltas, z.deltas);
    }

    /// A extends every reference by a correct word, B by a wrong one.
    fn all_wins(n: usize) -> (Vec<BleuStats>, Vec<BleuStats>) {
        let base: Vec<String> = (0..n).map(|i| format!("w{i} x{i} y{i}")).collect();
        let r: Vec<String> = base.iter().map(|s| format!("{s} good")).collect();
        let a = r.clone();
        let b: Vec<String> = base.iter().map(|s| format!("{s} bad")).collect();
        (sentence_stats(&a, &r).unwrap(), sentence_stats(&b, &r).unwrap())
    }

    #[test]
    fn all_wins_gives_minimum_p() {
        let (a, b) = all_wins(10);
        for seed in 0..20 {
            let res = paired_bootstrap(&a, &b, 100, seed).unwrap();
            assert_eq!(res.wins_a, 100);
            assert_eq!(res.p_value, 1.0 / 101.0);
            // Swapping the systems flips the leader, not the p-value.
            let rev = paired_bootstrap(&b, &a, 100, seed).unwrap();
            assert_eq!(rev.leader, Leader::B);
            assert_eq!(rev.p_value, 1.0 / 101.0);
        }
    }

    #[test]
    fn same_indices_drive_both_systems() {
        let (a, b) = all_wins(6);
        let res = paired_bootstrap(&a, &b, 120, 9).unwrap();
        for (idx, d) in resample_indices(6, 120, 9).iter().zip(&res.deltas) {
            let sa = BleuStats::corpus_score(idx.iter().map(|&i| a[i]));
            let sb = BleuStats::corpus_score(idx.iter().map(|&i| b[i]));
            assert_eq!(sa - sb, *d);
        }
    }

    #[test]
    fn validation() {
        let (a, b) = all_wins(4);
        assert_eq!(paired_bootstrap(&a, &b[..3], 100, 0).unwrap_err(), SignificanceError::LengthMismatch { a: 4, b: 3 });
        assert_eq!(paired_bootstrap(&a[..1], &b[..1], 100, 0).unwrap_err(), SignificanceError::TooFewSentences(1));
        assert_eq!(paired_bootstrap(&a, &b, 99, 0).unwrap_err(), SignificanceError::TooFewResamples(99));
    }

    fn with_p(p: f64) -> SignificanceResult {
        SignificanceResult {
            p_value: p,
            num_resamples: 1000,
            observed_delta: 1.0,
            score_a: 2.0,
            score_b: 1.0,
            wins_a: 0,
            wins_b: 0,
            leader: Leader::A,
            seed: 0,
            deltas: vec![],
        }
    }

    #[test]
    fn threshold_is_strict() {
        assert!(significance_report(with_p(0.049), 0.05).significant);
        assert!(!significance_report(with_p(0.05), 0.05).significant);
        let line = significance_report(with_p(0.049), 0.05).to_string();
        assert!(line.starts_with("significant"), "{line}");
    }

    #[test]
    fn mean_stat_for_sentence_scores() {
        let a = [0.9, 0.8, 0.95, 0.85];
        let b = [0.5, 0.4, 0.45, 0.6];
        let res = paired_bootstrap(&a, &b, 200, 3).unwrap();
        assert!((res.observed_delta - 0.3875).abs() < 1e-12);
        assert_eq!(res.p_value, 1.0 / 201.0);
    }

    proptest! {
        #[test]
        fn p_value_in_range(a in prop::collection::vec(0.0f64..1.0, 2..12), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().rev().copied().collect();
            let res = paired_bootstrap(&a, &b, 100, seed).unwrap();
            prop_assert!(res.p_value > 0.0 && res.p_value <= 1.0);
            prop_assert!(res.wins_a + res.wins_b <= 100);
            prop_assert_eq!(res.deltas.len(), 100);
        }
    }
}
