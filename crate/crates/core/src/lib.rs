//! Sub-layer contextualization analysis for BERT-base encoders.
//!
//! The crate runs an instrumented encoder forward pass, stores the pooled
//! keyword vectors of every Self-Attention, Feed-Forward Activation and Output
//! sub-layer, and analyses them with cosine-similarity curves, PCA distances
//! and a grid of linear word-sense probes.

pub mod cli;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod probes;
pub mod report;
pub mod store;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod weights;

pub use error::{Error, Result};
