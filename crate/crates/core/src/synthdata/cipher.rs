//! Cipher languages: every language is a bijective word substitution of a
//! shared concept sequence plus a fixed word-order rule, so translation
//! between any two clean languages has a closed form.

use std::collections::HashSet;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::{DataError, MultiParallelCorpus};
use crate::rng::PortableRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    Identity,
    Reverse,
    /// Swaps positions (0,1), (2,3), ...
    SwapAdjacent,
    RotateLeft(usize),
}

impl WordOrder {
    /// `perm[i]` is the concept position placed at surface position `i`.
    pub fn permutation(self, n: usize) -> Vec<usize> {
        match self {
            WordOrder::Identity => (0..n).collect(),
            WordOrder::Reverse => (0..n).rev().collect(),
            WordOrder::SwapAdjacent => (0..n).map(|i| if i % 2 == 0 { (i + 1).min(n - 1) } else { i - 1 }).collect(),
            WordOrder::RotateLeft(k) => (0..n).map(|i| (i + k) % n).collect(),
        }
    }

    pub fn apply<T: Clone>(self, items: &[T]) -> Vec<T> {
        self.permutation(items.len()).into_iter().map(|j| items[j].clone()).collect()
    }

    pub fn invert<T: Clone>(self, surface: &[T]) -> Vec<T> {
        let perm = self.permutation(surface.len());
        let mut out = surface.to_vec();
        for (i, &j) in perm.iter().enumerate() {
            out[j] = surface[i].clone();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherLanguage {
    pub code: String,
    /// `substitution[c]` is the surface word for concept `c`.
    pub substitution: Vec<String>,
    pub order: WordOrder,
}

/// Word dropout applied to one language's sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub language: String,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherSpec {
    pub concepts: usize,
    pub languages: Vec<CipherLanguage>,
    pub noise: Option<NoiseSpec>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn random_word(rng: &mut PortableRng) -> String {
    let syllables = 2 + rng.below(2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
        w.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    w
}

impl CipherSpec {
    /// Builds a spec with random pronounceable words, distinct across all languages.
    pub fn random(concepts: usize, languages: &[(&str, WordOrder)], seed: u64) -> Result<Self, DataError> {
        let mut rng = PortableRng::stream(seed, 0);
        let mut used = HashSet::new();
        let mut langs = Vec::with_capacity(languages.len());
        let max_words = CONSONANTS.len().pow(3) * VOWELS.len().pow(3);
        if concepts * languages.len() > max_words / 4 {
            return Err(DataError::Config(format!("{concepts} concepts is too many for the word generator")));
        }
        for &(code, order) in languages {
            let mut substitution = Vec::with_capacity(concepts);
            while substitution.len() < concepts {
                let w = random_word(&mut rng);
                if used.insert(w.clone()) {
                    substitution.push(w);
                }
            }
            langs.push(CipherLanguage {
                code: code.to_string(),
                substitution,
                order,
            });
        }
        let spec = Self {
            concepts,
            languages: langs,
            noise: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_noise(mut self, language: &str, dropout: f64, seed: u64) -> Self {
        self.noise = Some(NoiseSpec {
            language: language.to_string(),
            dropout,
            seed,
        });
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let cfg = |m: String| Err(DataError::Config(m));
        if self.concepts == 0 {
            return cfg("empty concept vocabulary".into());
        }
        if self.languages.is_empty() {
            return cfg("no languages".into());
        }
        let mut codes = HashSet::new();
        for lang in &self.languages {
            if !codes.insert(lang.code.as_str()) {
                return cfg(format!("duplicate language {}", lang.code));
            }
            if lang.substitution.len() != self.concepts {
                return cfg(format!(
                    "{}: substitution has {} words for {} concepts",
                    lang.code,
                    lang.substitution.len(),
                    self.concepts
                ));
            }
            let distinct: HashSet<&String> = lang.substitution.iter().collect();
            if distinct.len() != self.concepts {
                return cfg(format!("{}: substitution is not a bijection", lang.code));
            }
            if lang.substitution.iter().any(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
                return cfg(format!("{}: words must be non-empty and whitespace-free", lang.code));
            }
        }
        if let Some(noise) = &self.noise {
            if !codes.contains(noise.language.as_str()) {
                return cfg(format!("noise language {} not in spec", noise.language));
            }
            if !(0.0..1.0).contains(&noise.dropout) {
                return cfg(format!("dropout {} outside [0, 1)", noise.dropout));
            }
        }
        Ok(())
    }

    pub fn language(&self, code: &str) -> Option<&CipherLanguage> {
        self.languages.iter().find(|l| l.code == code)
    }

    /// Clean surface sentence of `concepts` in language `code`.
    pub fn render(&self, code: &str, concepts: &[usize]) -> Option<String> {
        let lang = self.language(code)?;
        let words: Vec<&str> = lang
            .order
            .apply(concepts)
            .into_iter()
            .map(|c| lang.substitution.get(c).map(String::as_str))
            .collect::<Option<_>>()?;
        Some(words.join(" "))
    }

    /// Concept sequence of a clean sentence, or `None` if a word is unknown.
    pub fn parse(&self, code: &str, sentence: &str) -> Option<Vec<usize>> {
        let lang = self.language(code)?;
        let surface: Vec<usize> = sentence
            .split_whitespace()
            .map(|w| lang.substitution.iter().position(|s| s == w))
            .collect::<Option<_>>()?;
        Some(lang.order.invert(&surface))
    }

    /// Closed-form translation of a clean sentence from one language to another.
    pub fn translate(&self, from: &str, to: &str, sentence: &str) -> Option<String> {
        self.render(to, &self.parse(from, sentence)?)
    }
}

/// A generated corpus with the data needed to check it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: MultiParallelCorpus,
    /// Pivot concept sequence of every row.
    pub concepts: Vec<Vec<usize>>,
    /// Noise-free sentences of the noisy language, if noise is set.
    pub clean: Option<Vec<String>>,
}

fn drop_words(words: &[String], p: f64, rng: &mut PortableRng) -> Vec<String> {
    let kept: Vec<String> = words.iter().filter(|_| rng.unit_f64() >= p).cloned().collect();
    if kept.is_empty() {
        vec![words[rng.below(words.len())].clone()]
    } else {
        kept
    }
}

/// Generates `num_rows` aligned rows with sentence lengths drawn uniformly from `lengths`.
pub fn generate(spec: &CipherSpec, num_rows: usize, lengths: RangeInclusive<usize>, seed: u64) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    if num_rows == 0 {
        return Err(DataError::Config("need at least one row".into()));
    }
    let (lo, hi) = (*lengths.start(), *lengths.end());
    if lo == 0 || lo > hi {
        return Err(DataError::Config(format!("bad sentence length range {lo}..={hi}")));
    }
    let mut rng = PortableRng::stream(seed, 1);
    let noise = spec.noise.as_ref();
    let mut noise_rng = noise.map(|n| PortableRng::stream(n.seed, 2));
    let mut rows = Vec::with_capacity(num_rows);
    let mut concepts = Vec::with_capacity(num_rows);
    let mut clean = noise.map(|_| Vec::with_capacity(num_rows));
    for _ in 0..num_rows {
        let len = lo + rng.below(hi - lo + 1);
        let seq: Vec<usize> = (0..len).map(|_| rng.below(spec.concepts)).collect();
        let mut row = Vec::with_capacity(spec.languages.len());
        for lang in &spec.languages {
            let text = spec.render(&lang.code, &seq).expect("validated spec");
            match (noise, noise_rng.as_mut(), clean.as_mut()) {
                (Some(n), Some(nr), Some(cl)) if n.language == lang.code => {
                    let words: Vec<String> = text.split(' ').map(str::to_string).collect();
                    row.push(drop_words(&words, n.dropout, nr).join(" "));
                    cl.push(text);
                }
                _ => row.push(text),
            }
        }
        rows.push(row);
        concepts.push(seq);
    }
    let codes = spec.languages.iter().map(|l| l.code.clone()).collect();
    let corpus = MultiParallelCorpus::new(format!("cipher-{seed}"), codes, rows)?;
    Ok(SyntheticCorpus { corpus, concepts, clean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> CipherSpec {
        CipherSpec::random(
            30,
            &[("en", WordOrder::Identity), ("es", WordOrder::SwapAdjacent), ("pt", WordOrder::Reverse)],
            11,
        )
        .unwrap()
    }

    #[test]
    fn deterministic() {
        let a = generate(&spec(), 50, 3..=7, 4).unwrap();
        let b = generate(&spec(), 50, 3..=7, 4).unwrap();
        assert_eq!(super::super::corpus_to_tsv(&a.corpus), super::super::corpus_to_tsv(&b.corpus));
        let c = generate(&spec(), 50, 3..=7, 5).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn substitution_image_with_identity_orders() {
        // Oracle: map each A word to its concept, then to the B word, independently of `generate`.
        let s = CipherSpec::random(50, &[("aa", WordOrder::Identity), ("bb", WordOrder::Identity)], 3).unwrap();
        let g = generate(&s, 200, 1..=9, 8).unwrap();
        let (a, b) = (&s.languages[0].substitution, &s.languages[1].substitution);
        for row in 0..g.corpus.len() {
            let expected: Vec<&str> = g
                .corpus
                .sentence(row, "aa")
                .unwrap()
                .split(' ')
                .map(|w| b[a.iter().position(|x| x == w).unwrap()].as_str())
                .collect();
            assert_eq!(expected.join(" "), g.corpus.sentence(row, "bb").unwrap());
        }
    }

    #[test]
    fn closed_form_translation_reproduces_rows() {
        let s = spec();
        let g = generate(&s, 100, 1..=8, 2).unwrap();
        for row in 0..g.corpus.len() {
            for from in ["en", "es", "pt"] {
                for to in ["en", "es", "pt"] {
                    let src = g.corpus.sentence(row, from).unwrap();
                    assert_eq!(s.translate(from, to, src).as_deref(), g.corpus.sentence(row, to));
                }
            }
        }
    }

    #[test]
    fn zero_dropout_is_identity() {
        let s = spec().with_noise("es", 0.0, 9);
        let g = generate(&s, 80, 2..=6, 1).unwrap();
        assert_eq!(g.corpus.column("es").unwrap(), g.clean.as_ref().unwrap().iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn noise_touches_only_designated_language() {
        let plain = generate(&spec(), 80, 2..=6, 1).unwrap();
        let noisy = generate(&spec().with_noise("es", 0.5, 9), 80, 2..=6, 1).unwrap();
        assert_eq!(plain.corpus.column("en"), noisy.corpus.column("en"));
        assert_eq!(plain.corpus.column("pt"), noisy.corpus.column("pt"));
        assert_ne!(plain.corpus.column("es"), noisy.corpus.column("es"));
        assert_eq!(plain.corpus.column("es").unwrap(), noisy.clean.unwrap().iter().map(String::as_str).collect::<Vec<_>>());
    }

    fn retained_fraction(p: f64) -> f64 {
        let g = generate(&spec().with_noise("es", p, 21), 400, 4..=8, 6).unwrap();
        let clean = g.clean.unwrap();
        let (mut kept, mut total) = (0usize, 0usize);
        for (noisy, clean) in g.corpus.column("es").unwrap().iter().zip(&clean) {
            let mut pool: Vec<&str> = clean.split(' ').collect();
            total += pool.len();
            for w in noisy.split(' ') {
                if let Some(i) = pool.iter().position(|x| *x == w) {
                    pool.swap_remove(i);
                    kept += 1;
                }
            }
        }
        assert!(total >= 1000);
        kept as f64 / total as f64
    }

    #[test]
    fn overlap_decreases_with_dropout() {
        let fractions: Vec<f64> = [0.0, 0.1, 0.3, 0.5, 0.8].iter().map(|&p| retained_fraction(p)).collect();
        assert_eq!(fractions[0], 1.0);
        for w in fractions.windows(2) {
            assert!(w[1] < w[0], "{fractions:?}");
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(CipherSpec::random(0, &[("en", WordOrder::Identity)], 1).is_err());
        assert!(CipherSpec::random(5, &[], 1).is_err());
        let mut s = spec();
        s.languages[1].substitution[3] = s.languages[1].substitution[4].clone();
        assert!(s.validate().is_err());
        assert!(spec().with_noise("es", 1.0, 0).validate().is_err());
        assert!(spec().with_noise("de", 0.1, 0).validate().is_err());
        assert!(generate(&spec(), 0, 1..=3, 0).is_err());
        assert!(generate(&spec(), 3, 0..=3, 0).is_err());
    }

    proptest! {
        #[test]
        fn word_order_invert_is_inverse(n in 1usize..12, k in 0usize..20, which in 0usize..4) {
            let order = [WordOrder::Identity, WordOrder::Reverse, WordOrder::SwapAdjacent, WordOrder::RotateLeft(k)][which];
            let items: Vec<usize> = (0..n).collect();
            let mut perm = order.permutation(n);
            prop_assert_eq!(order.invert(&order.apply(&items)), items);
            perm.sort();
            prop_assert_eq!(perm, (0..n).collect::<Vec<_>>());
        }
    }
}
