//! Desk-scale multimodal machine translation.
//!
//! A framework-free implementation of cascaded multimodal translation:
//! a minimal reverse-mode autodiff tensor core, transformer and two-pass
//! deliberation decoders (additive and cascade), three visual integration
//! schemes (additive conditioning, visual cross-attention over pooled /
//! convolutional / action-embedding features), BPE text processing, beam
//! search with an incongruent-decoding harness, BLEU with approximate
//! randomization significance testing, and a training/evaluation pipeline.

pub mod decode;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod subword;
pub mod tensor;

pub use error::{Error, Result};
