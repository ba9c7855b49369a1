//! Hallucination detection from layer-wise decoder dynamics.
//!
//! The pipeline reads recorded next-token prediction traces, decodes every
//! decoder layer's hidden state through the logit lens, summarizes the
//! trajectory as an Overthinking Score plus per-layer entropy and attention
//! features, and trains lightweight classifiers on the result.

mod codec;

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod detectors;
pub mod evaluation;
pub mod features;
pub mod logitlens;
pub mod trace;

pub use codec::CodecError;
