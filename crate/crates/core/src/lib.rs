//! Layer-wise cross-lingual representation alignment for low-resource translation.
//!
//! The crate is a small laboratory built around one objective: a causal-LM
//! translation loss augmented with a linear-CKA alignment penalty between the
//! hidden states of parallel sentences at a single transformer layer, plus a
//! representation-anchoring penalty that keeps the pivot-language states close
//! to an adapter-disabled reference pass.
//!
//! Module map:
//! - [`tensor`]: dense `f64` tensors with define-by-run reverse-mode differentiation
//!   and a finite-difference gradient oracle.
//! - [`model`]: toy decoder-only transformer with per-layer hidden-state taps and
//!   low-rank adapters on the q/k/v/o/gate/up/down projections.
//! - [`align`]: token gathering, mean-centering, linear CKA, anchoring loss and the
//!   combined objective.
//! - [`train`]: label-smoothed LM loss, AdamW with warmup and clipping, gradient
//!   accumulation, the training step and the multi-epoch run.
//! - [`metrics`]: corpus BLEU, ChrF and the 0.6/0.4 composite.
//! - [`data`]: synthetic parallel languages, CSV ingestion, splits, the toy
//!   tokenizer, prompt formatting and batch assembly.
//! - [`eval`]: greedy decoding and corpus evaluation of a model.

pub mod align;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
