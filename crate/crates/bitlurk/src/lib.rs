//! A desk-scale lab for studying how weight quantization interacts with
//! data-poisoning backdoors in a small text-to-SQL language model.
//!
//! The crate generates a synthetic question/schema/SQL corpus, optionally
//! poisons it with a trigger phrase that swaps the response for a
//! destructive `DROP TABLE` payload, trains a small decoder-only model with
//! low-rank adapters, and measures how the backdoor survives symmetric
//! absmax weight quantization applied either before fine-tuning or before
//! inference. Evaluation covers attack success rate, hallucination rate,
//! a per-generation payload signal computed from the logit traces, and a
//! set of SQL similarity metrics against the reference responses.
//!
//! Everything is deterministic: a single experiment seed fixes the corpus,
//! the poison selection, the weights, the training batches, and therefore
//! every downstream artifact byte for byte.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod rng;
pub mod sql_metrics;
pub mod tokenizer;

pub use error::{Error, Result};
