//! Continual alignment of a frozen segmentation backbone.
//!
//! A small encoder/decoder is pretrained once on a broad synthetic mixture
//! and frozen. Each new domain gets its own alignment layer between encoder
//! and decoder; per-task VAEs over pooled encoder features decide at
//! inference which layer to use, falling back to the identity layer for
//! inputs no task claims. Baseline continual-learning strategies, the
//! metric suite and an experiment harness sit on top.

mod binio;
mod error;
mod nn;

pub mod alignment;
pub mod bench;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod router;
pub mod strategies;

pub use error::{CoreError, Result};
