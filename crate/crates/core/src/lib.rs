//! Preference-model pretraining on synthetic code-preference pairs.
//!
//! The crate covers the whole desk-scale pipeline: a byte tokenizer and a
//! stack-machine program generator that yields verifiable chosen/rejected
//! pairs, a small causal transformer with language-modeling and reward
//! heads, the pretraining and finetuning loops, and the evaluation metrics
//! and sweeps used to compare initializations.

pub mod dsl;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pairgen;
pub mod report;
pub mod schedule;
pub mod seed;
pub mod step;
pub mod sweep;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState, TokenSequence, Transformer};
