//! conmamba: a from-scratch speech recognizer built on selective
//! state-space blocks.
//!
//! The encoder subsamples 100 Hz log-mel features to 25 frames/s and runs
//! stacked bidirectional Mamba layers in a Conformer-style layout; the
//! decoder is a unidirectional Mamba stack with multi-head cross-attention
//! over the encoder output. Training (AdamW, label-smoothed CE, Noam
//! schedule) and decoding (greedy/beam) are implemented here with
//! hand-derived backward passes — no autodiff framework.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod search;
pub mod ssm;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
