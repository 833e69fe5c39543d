//! Bidirectional cloze language modeling for text recognition.
//!
//! The crate builds a complete toy recognition pipeline on top of a small
//! reverse-mode differentiation core:
//!
//! - [`numerics`]: tensors, the tape, Adam, gradient checking
//! - [`nn`]: attention masks, multi-head attention, encoder and cloze layers
//! - [`lm`]: the bidirectional cloze language model and its causal baseline
//! - [`vision`]: glyph rendering and the toy vision model
//! - [`fusion`]: gated fusion, iterative correction and supervised training
//! - [`selftrain`]: certainty scoring and ensemble self-training
//! - [`textdata`]: corpora, augmentation, benchmarks and metrics
//! - [`checkpoint`]: the binary tensor container
//! - [`commands`]: configuration and the batch experiment commands

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod lm;
pub mod nn;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod selftrain;
pub mod textdata;
pub mod vision;

pub use error::{Error, Result};
