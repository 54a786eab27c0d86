//! Blind separation of single-channel music recordings into one track per
//! instrument.
//!
//! The mixture's sampled STFT is explained frame by frame as a sum of
//! harmonic tones. A 1-D U-Net proposes the tone parameters one tone at a
//! time; discrete and multimodal parameters are trained with policy
//! gradients, the rest by backpropagation, and a per-instrument dictionary of
//! harmonic amplitudes is learned alongside. Tracks are resynthesized from
//! the direct (free-coefficient) tone spectra.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod gabor;
pub mod inference;
mod linalg;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod phasesolver;
pub mod policy;
pub mod rollout;
mod special;
pub mod tonemodel;
pub mod trainer;

pub use error::{Error, Result};
pub use num_complex::Complex64;
