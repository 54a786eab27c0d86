//! Synthetic two-part music generated from the tone model, with known
//! per-instrument tracks. Used by tests, benchmarks and the demo.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::gabor::{GaborConfig, TimeSignal};
use crate::network::UNetConfig;
use crate::policy::LiftScheme;
use crate::rollout::{stream, ModelConfig};
use crate::tonemodel::{harmonic_frequencies, Dictionary};
use crate::trainer::TrainConfig;
use crate::config::RunConfig;

/// Harmonic amplitudes `0.5^(h-1)` (column 0) and an odd-heavy bright
/// spectrum (column 1).
pub fn reference_dictionary(n_har: usize) -> Dictionary {
    let mut entries = Vec::with_capacity(n_har * 2);
    for h in 0..n_har {
        entries.push(0.5f64.powi(h as i32));
        let k = (h + 1) as f64;
        entries.push(if h % 2 == 0 { 1.0 / k.sqrt() } else { 0.3 / k });
    }
    Dictionary::new(n_har, 2, entries).expect("sizes agree")
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixture: TimeSignal,
    /// One track per dictionary column.
    pub sources: Vec<TimeSignal>,
}

/// Settings for [`two_part_mixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub n_har: usize,
    /// Per instrument, fundamentals are drawn log-uniformly from `(lo, hi)`.
    pub ranges: [(f64, f64); 2],
    /// Note durations are drawn uniformly from this range.
    pub note_lo_s: f64,
    pub note_hi_s: f64,
    /// Probability that a note slot is silent.
    pub rest_prob: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            sample_rate_hz: 4000.0,
            duration_s: 20.0,
            n_har: 6,
            ranges: [(100.0, 190.0), (170.0, 330.0)],
            note_lo_s: 0.25,
            note_hi_s: 0.6,
            rest_prob: 0.1,
            seed: 7,
        }
    }
}

/// Independent melodies per instrument; simultaneous fundamentals are kept
/// at least a semitone apart.
pub fn two_part_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    let dict = reference_dictionary(spec.n_har);
    let fs = spec.sample_rate_hz;
    let n = (spec.duration_s * fs).round() as usize;
    let mut rng = stream(&[spec.seed]);
    // Per instrument: list of (start, end, f1) in samples.
    let mut notes: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(), Vec::new()];
    for eta in 0..2 {
        let mut t = 0usize;
        while t < n {
            let len = (rng.random_range(spec.note_lo_s..spec.note_hi_s) * fs) as usize;
            let end = (t + len).min(n);
            if rng.random::<f64>() >= spec.rest_prob {
                let f = loop {
                    let (lo, hi) = spec.ranges[eta];
                    let f = lo * (hi / lo).powf(rng.random::<f64>());
                    let clash = eta == 1
                        && notes[0]
                            .iter()
                            .any(|&(s, e, g)| s < end && t < e && (f / g).ln().abs() < 2f64.ln() / 12.0);
                    if !clash {
                        break f;
                    }
                };
                notes[eta].push((t, end, f));
            }
            t = end;
        }
    }
    let mut sources = Vec::with_capacity(2);
    for (eta, list) in notes.iter().enumerate() {
        let mut x = vec![0.0; n];
        for &(s, e, f1) in list {
            let freqs = harmonic_frequencies(f1, 0.0, spec.n_har)?;
            let phases: Vec<f64> = (0..spec.n_har).map(|_| rng.random_range(-PI..PI)).collect();
            let amp = rng.random_range(0.5..1.0);
            let attack = (0.01 * fs) as usize;
            let release = (0.03 * fs) as usize;
            for (t, xt) in x.iter_mut().enumerate().take(e).skip(s) {
                let i = t - s;
                let env = (i as f64 / attack as f64).min(1.0) * ((e - t) as f64 / release as f64).min(1.0);
                let tt = t as f64 / fs;
                let mut v = 0.0;
                for (h, f) in freqs.iter().enumerate() {
                    if *f < fs / 2.0 {
                        v += dict.get(h, eta) * (2.0 * PI * f * tt + phases[h]).cos();
                    }
                }
                *xt += 0.25 * amp * env * v;
            }
        }
        sources.push(TimeSignal::new(x, fs)?);
    }
    let mix: Vec<f64> = sources[0].samples.iter().zip(&sources[1].samples).map(|(a, b)| a + b).collect();
    Ok(Mixture {
        mixture: TimeSignal::new(mix, fs)?,
        sources,
    })
}

/// Small model and schedule sized for the default [`MixtureSpec`]: the
/// default window and bin spacing on a 4 kHz signal.
pub fn reduced_run_config() -> RunConfig {
    let gabor = GaborConfig {
        sample_rate_hz: 4000.0,
        zeta_s: 1024.0 / 48000.0,
        alpha_s: 40.0 / 4000.0,
        beta_hz: 4000.0 / 1024.0,
        n_spc: 512,
    };
    let mut model = ModelConfig::paper(2);
    model.gabor = gabor;
    model.unet = UNetConfig {
        strides: vec![4, 4, 4],
        channels: vec![16, 24, 32],
        kernel: 5,
        head_kernels: vec![3, 1],
        head_channels: 16,
        n_ins: 2,
        coord_start: 0.01,
        coord_end: 0.0,
    };
    model.n_har = 6;
    model.nu_min = 20;
    model.nu_max = 100;
    // Milder exploration: two lift values instead of three cut the samples
    // per frame from 9 to 4 and keep the lifted draws near the policy.
    model.lift = LiftScheme {
        r_values: vec![1.0, 0.3],
    };
    let train = TrainConfig {
        iterations: 5000,
        lr_theta: 1e-2,
        lr_dict: 1e-2,
        seeds: vec![0, 1, 2],
        checkpoint_every: 500,
        log_every: 50,
        ..TrainConfig::default()
    };
    RunConfig { model, train }
}
