//! The desk-scale noisy-source benchmark.
//!
//! Three cipher languages over one concept vocabulary: `en` (identity order,
//! the clean pivot), `es` (adjacent words swapped, the primary source) and
//! `pt` (identity order, the target). A toy transformer is trained on clean
//! `es→pt` and `en→pt`; the test set drops `es` words with probability
//! `dropout`, so a decoder that also conditions on the clean `en` rendering
//! can recover what the noisy source lost.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::model::{train, ModelConfig, TrainOptions, TrainReport, Transformer, TranslationPair};
use crate::synthdata::{generate, CipherSpec, SyntheticCorpus, WordOrder};
use crate::tokenizer::{train_bpe, BpeModel};

pub const PRIMARY: &str = "es";
pub const PIVOT: &str = "en";
pub const TARGET: &str = "pt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub concepts: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub bpe_vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainOptions,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            concepts: 24,
            train_rows: 1500,
            test_rows: 200,
            min_words: 3,
            max_words: 7,
            bpe_vocab_size: 1000,
            dropout: 0.3,
            seed: 7,
            model: ModelConfig::default(),
            // 15 epochs reach ~99% held-out token accuracy; loss is ~0.01 by epoch 10.
            train: TrainOptions {
                epochs: 15,
                ..TrainOptions::default()
            },
        }
    }
}

impl ToyConfig {
    fn lengths(&self) -> RangeInclusive<usize> {
        self.min_words..=self.max_words
    }

    pub fn cipher(&self) -> Result<CipherSpec, ExperimentError> {
        Ok(CipherSpec::random(
            self.concepts,
            &[(PIVOT, WordOrder::Identity), (PRIMARY, WordOrder::SwapAdjacent), (TARGET, WordOrder::Identity)],
            self.seed,
        )?)
    }

    pub fn pairs() -> [TranslationPair; 2] {
        [TranslationPair::new(PRIMARY, TARGET), TranslationPair::new(PIVOT, TARGET)]
    }
}

/// Clean training corpus and noisy test corpus (independent draws).
pub struct ToyData {
    pub cipher: CipherSpec,
    pub train: SyntheticCorpus,
    pub test: SyntheticCorpus,
}

pub fn toy_data(cfg: &ToyConfig) -> Result<ToyData, ExperimentError> {
    let cipher = cfg.cipher()?;
    let train = generate(&cipher, cfg.train_rows, cfg.lengths(), cfg.seed)?;
    let noisy = cipher.clone().with_noise(PRIMARY, cfg.dropout, cfg.seed ^ 0x5eed);
    let test = generate(&noisy, cfg.test_rows, cfg.lengths(), cfg.seed.wrapping_add(1))?;
    Ok(ToyData { cipher, train, test })
}

pub struct ToySetup {
    pub data: ToyData,
    pub tokenizer: BpeModel,
    pub model: Transformer,
    pub report: TrainReport,
}

/// Generates the data, trains the tokenizer on the training corpus and then the model.
pub fn build_toy(cfg: &ToyConfig) -> Result<ToySetup, ExperimentError> {
    let data = toy_data(cfg)?;
    let tokenizer = train_bpe(&data.train.corpus, cfg.bpe_vocab_size)?;
    let (model, report) = train(cfg.model.clone(), &data.train.corpus, &ToyConfig::pairs(), &tokenizer, &cfg.train)?;
    Ok(ToySetup {
        data,
        tokenizer,
        model,
        report,
    })
}
