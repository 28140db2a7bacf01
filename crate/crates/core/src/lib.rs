//! Desk-scale lab for speech-to-LM connector ASR systems.
//!
//! The crate bundles everything needed to train and stress-test the
//! "frozen encoder -> downsampler -> trainable projector -> frozen LM"
//! architecture on a laptop: a WAV codec and resampler, pitch-preserving
//! time-scale modification, SNR-calibrated noise mixing, a log-mel frontend
//! stand-in for the frozen encoder, the projector/LoRA/tiny-transformer
//! stack, a CTC baseline with exact gradients, AdamW training with
//! early stopping, a WER harness with error-type breakdown, and
//! speech-to-text embedding alignment probes.

pub mod analysis;
pub mod audio;
pub mod checkpoint;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
