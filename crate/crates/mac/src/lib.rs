//! Evidence-aware claim verification with a hierarchical multi-head
//! attentive network.
//!
//! A claim and its retrieved evidence documents are encoded with shared
//! bidirectional LSTMs, combined through two attention layers (words within
//! each document, then documents within the evidence set), enriched with
//! speaker and publisher embeddings, and scored by a small feed-forward
//! head that outputs the probability the claim is true.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff over dense `f64` matrices
//! - [`layers`]: embeddings, bidirectional LSTM, linear layers
//! - [`attention`]: multi-head additive attention, word and document level
//! - [`model`]: full network assembly, forward pass and loss
//! - [`data`]: corpus loading, vocabularies, encoding, splits
//! - [`training`]: Adam, early stopping, cross-validated training
//! - [`metrics`]: AUC, precision/recall/F1, signed-rank test
//! - [`checkpoint`]: binary model snapshots
//! - [`synth`]: synthetic corpora for end-to-end sanity checks

pub mod attention;
pub mod checkpoint;
pub mod data;
mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
