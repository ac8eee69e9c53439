//! Context-aware neural machine translation with cached and shortened
//! encoder states.
//!
//! The encoder output of every translated sentence is shortened (pooled,
//! grouped or selected into a small number of vectors), cached per document
//! and attended to by the decoder while translating the following sentences.
//! Sentence-level, single-encoder and multi-encoder baselines share the same
//! transformer implementation.

pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod shortening;
pub mod training;

pub use error::{Error, Result};
