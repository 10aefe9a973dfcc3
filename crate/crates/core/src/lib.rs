//! One-shot voice conversion over discrete speech units.
//!
//! The pipeline disentangles three utterance-level attributes — pitch-energy,
//! rhythm, and speaker — on top of a run-length-deduplicated discrete unit
//! sequence. A prosody predictor estimates pitch/energy bin weights, voicing,
//! and per-unit durations from the prosodic attributes; a source-filter
//! synthesizer plus a scalar energy branch reconstructs the mel-spectrogram;
//! a least-squares adversarial loss sharpens reconstruction. Everything runs
//! on the CPU and is generic over the scalar type: `f32` for training speed,
//! `f64` where numeric checks matter.

pub mod bins;
pub mod cli;
pub mod config;
pub mod conversion;
pub mod data;
pub mod demo;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod graph;
pub mod io;
pub mod model;
pub mod networks;
pub mod scalar;
pub mod training;
pub mod units;

pub use config::SystemConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the CLI and the bundled demos.
pub type DefaultScalar = f32;

