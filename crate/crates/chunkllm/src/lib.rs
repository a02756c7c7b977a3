//! Chunk-sparse transformer decoding on a desk-scale byte-level backbone.
//!
//! The crate trains two pluggable adapter families on a frozen toy
//! transformer — a chunk-boundary classifier over first-layer hidden states
//! and per-layer Q/K compression adapters distilled from full attention —
//! then decodes with a chunked KV cache: top-k chunk selection, cross-layer
//! voting, and boundary-triggered reselection.
//!
//! Module map:
//! - [`numerics`]: dense tensors, reverse-mode autodiff, Adam, gradient checks
//! - [`backbone`]: the frozen decoder-only transformer, pretraining, checkpoints
//! - [`corpus`]: synthetic labeled corpora (sentences + passkey retrieval)
//! - [`chunker`]: chunk-boundary adapter, training, and boundary metrics
//! - [`chunkattn`]: QK adapters, teacher aggregation, attention distillation
//! - [`engine`]: chunk-sparse decoding, cache policies, evals, latency bench

pub mod backbone;
pub mod chunkattn;
pub mod chunker;
pub mod corpus;
pub mod engine;
mod error;
pub mod numerics;

pub use error::{Error, Result};
