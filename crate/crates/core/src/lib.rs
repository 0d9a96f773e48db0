//! Causality-aware encoding and cascaded, confidence-guided decoding for
//! abductive event-sequence captioning.
//!
//! Event sequences arrive with one event masked out; the model describes
//! every event and infers a sentence for the masked one from its premise
//! context. Training and evaluation run on a synthetic benchmark with
//! planted cause-effect structure, so every masked sentence is provably
//! recoverable and model quality is measured against that ceiling.

pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
