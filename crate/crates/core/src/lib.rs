//! Perplexity-based pruning of pretraining corpora.
//!
//! The pipeline partitions a tokenized corpus into a reference split and a
//! training split ([`splitter`]), fits a small reference language model on
//! the former ([`reflm`]), scores every training sample ([`scorer`]), keeps a
//! percentile band of the perplexity distribution ([`selector`]) and writes
//! the pruned corpus back out. [`analyzer`], [`planner`] and [`evalagg`]
//! cover the surrounding analyses: domain composition, perplexity
//! distributions, repeated-data budgets and downstream accuracy aggregation.

pub mod analyzer;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalagg;
pub mod fsio;
pub mod hash;
pub mod pipeline;
pub mod planner;
pub mod reflm;
pub mod scorer;
pub mod selector;
pub mod splitter;
pub mod synth;

pub use error::{Error, Result};
