//! Rare-object enhancement for a frozen toy vision-language model.
//!
//! Multi-modal class embeddings are learned from pooled object features and
//! re-sampled class descriptions, then used twice: a cross-attention adapter
//! refines the frozen model's visual tokens, and a patch-level score map
//! selects class names that are appended to the prompt as hints.

pub mod adapter;
pub mod ckpt;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod hinting;
pub mod numerics;
pub mod rng;
pub mod synth;
pub mod vlm;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
