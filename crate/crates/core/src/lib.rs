//! Multi-source translation with shallow fusion of conditional
//! distributions, plus the data, evaluation and experiment tooling around it.

pub mod experiments;
pub mod fusion;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod significance;
pub mod synthdata;
pub mod tokenizer;
