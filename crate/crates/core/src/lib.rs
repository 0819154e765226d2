//! Streaming grapheme-to-phoneme-and-prosody conversion with a chunk-aware
//! Conformer-CTC encoder.
//!
//! The crate is self-contained: [`numerics`] provides tensors and reverse-mode
//! autodiff, [`masking`] builds chunk-aware attention masks with first-layer
//! minimum look-ahead, [`encoder`] and [`ctc`] define the model and its
//! objective, [`engine`] runs it incrementally over a token stream, and
//! [`corpus`], [`metrics`] and [`train`] cover the synthetic task, scoring and
//! optimization.

pub mod config;
pub mod corpus;
pub mod ctc;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod numerics;
pub mod train;

pub use config::{PastAnchor, StreamingConfig};
pub use error::{Error, Result};
