//! Self-supervised attention (SSA) for small transformer text classifiers.
//!
//! The crate probes a classifier by masking random token subsets and
//! recording whether its decision flips, turns those outcomes into sparse
//! token-importance labels, and co-trains the classifier on its target task
//! together with an auxiliary token-labelling loss. An optional pooling layer
//! feeds the learned importance scores back into the sentence representation.
//!
//! Modules, bottom-up:
//! - [`tensor`]: `f32` tensors, a tape-based autodiff graph and Adam.
//! - [`encoder`]: transformer encoder, classification and SSA heads, hybrid pooling, checkpoints.
//! - [`corpus`]: tokenizer, vocabulary, TSV ingestion and a synthetic keyword corpus.
//! - [`ssa_data`]: the decision-flip probe and the masking-augmentation baseline.
//! - [`training`]: losses, the epoch-level co-training loop, metrics and run configuration.
//! - [`experiment`]: multi-seed sweeps and SVG rendering used by the CLI.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod ssa_data;
pub mod svg;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
