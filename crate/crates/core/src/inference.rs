//! Deterministic separation of a whole recording.
//!
//! Each frame is decoded with the policy modes; the direct spectrum of every
//! kept tone (`u = 1`) is added to the track of its instrument, and each
//! track is resynthesized on the reconstruction lattice. Tones flagged as
//! redundant are dropped.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gabor::{analyze, synthesize, Spectrogram, TimeSignal};
use crate::network::UNet;
use crate::rollout::ModelConfig;
use crate::tonemodel::Dictionary;

pub use crate::rollout::decode_frame;

/// Per-instrument direct-prediction spectrograms, in the scale of `signal`.
pub fn separate_spectrograms(
    signal: &TimeSignal,
    cfg: &ModelConfig,
    net: &UNet,
    dict: &Dictionary,
) -> Result<Vec<Spectrogram>> {
    if (signal.sample_rate_hz - cfg.gabor.sample_rate_hz).abs() > 1e-9 * cfg.gabor.sample_rate_hz {
        return Err(Error::ConfigMismatch(format!(
            "input is sampled at {} Hz, the model at {} Hz",
            signal.sample_rate_hz, cfg.gabor.sample_rate_hz
        )));
    }
    cfg.validate()?;
    let mut mix = analyze(signal, &cfg.gabor)?;
    let mut tracks = vec![Spectrogram::zeros(cfg.gabor, mix.n_len, mix.n_samples); cfg.n_ins()];
    let max = mix.max_abs();
    if max == 0.0 {
        return Ok(tracks);
    }
    mix.scale(1.0 / max);
    for k in 0..mix.n_len {
        let pred = decode_frame(cfg, net, dict, mix.frame(k))?;
        for (tone, y) in pred.tones.iter().zip(&pred.y_dir) {
            if !tone.u {
                continue;
            }
            let out = tracks[tone.eta].frame_mut(k);
            out.iter_mut().zip(y).for_each(|(o, v): (&mut Complex64, _)| *o += v * max);
        }
    }
    Ok(tracks)
}

/// One time signal per instrument, each as long as `signal`.
pub fn separate(signal: &TimeSignal, cfg: &ModelConfig, net: &UNet, dict: &Dictionary) -> Result<Vec<TimeSignal>> {
    separate_spectrograms(signal, cfg, net, dict)?
        .iter()
        .map(synthesize)
        .collect()
}
