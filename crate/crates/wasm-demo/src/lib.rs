//! Three interactive views for `www/index.html`: the spectrum of a single
//! harmonic tone, the lifted sampling densities, and a Gabor round trip.
//! Everything runs on the default 48 kHz lattice restricted to the bins
//! below `MAX_HZ`.

use unmix::gabor::{analyze, synthesize, GaborConfig, TimeSignal};
use unmix::policy::{gamma_log_pdf, lifted_bernoulli, lifted_gamma_params, lifted_log_probs};
use unmix::tonemodel::Peaks;
use unmix::Complex64;
use wasm_bindgen::prelude::*;

/// Upper end of the displayed frequency range.
pub const MAX_HZ: f64 = 5000.0;

fn lattice() -> GaborConfig {
    let mut g = GaborConfig::default();
    g.n_spc = (MAX_HZ / g.beta_hz) as usize;
    g
}

fn err(e: unmix::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Bin spacing of the displayed spectra in Hz.
#[wasm_bindgen]
pub fn bin_hz() -> f64 {
    lattice().beta_hz
}

/// Magnitude spectrum of one tone with harmonic amplitudes `decay^(h-1)`.
#[wasm_bindgen]
pub fn tone_spectrum(f1: f64, inharmonicity: f64, sigma_hz: f64, n_har: usize, decay: f64) -> Result<Vec<f64>, JsValue> {
    let g = lattice();
    let peaks = Peaks::new(f1, inharmonicity, sigma_hz, n_har, &g).map_err(err)?;
    let amps: Vec<Complex64> = (0..n_har).map(|h| Complex64::new(decay.powi(h as i32), 0.0)).collect();
    Ok(peaks.synth(&amps).iter().map(|z| z.norm()).collect())
}

/// Gamma density and its lifted version `Gamma(r(alpha-1)+1, r beta)`,
/// interleaved as `[x, p, p_lifted]` triples on `n` points in `(0, x_max]`.
#[wasm_bindgen]
pub fn gamma_curves(alpha: f64, beta: f64, r: f64, x_max: f64, n: usize) -> Vec<f64> {
    let (la, lb) = lifted_gamma_params(alpha, beta, r);
    (1..=n)
        .flat_map(|i| {
            let x = x_max * i as f64 / n as f64;
            [x, gamma_log_pdf(x, alpha, beta).exp(), gamma_log_pdf(x, la, lb).exp()]
        })
        .collect()
}

/// Lifted categorical probabilities for the given probabilities.
#[wasm_bindgen]
pub fn lifted_categorical(probs: Vec<f64>, r: f64) -> Vec<f64> {
    let logp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    lifted_log_probs(&logp, r).iter().map(|l| l.exp()).collect()
}

#[wasm_bindgen]
pub fn lifted_presence(p: f64, r: f64) -> f64 {
    lifted_bernoulli(p, r)
}

/// Analysis and resynthesis of a short chirp plus tone.
#[wasm_bindgen]
pub struct RoundTrip {
    error: f64,
    n_len: usize,
    n_spc: usize,
    magnitudes: Vec<f64>,
}

#[wasm_bindgen]
impl RoundTrip {
    /// Relative l2 error of `synthesize(analyze(x))`.
    #[wasm_bindgen(getter)]
    pub fn error(&self) -> f64 {
        self.error
    }

    #[wasm_bindgen(getter)]
    pub fn n_len(&self) -> usize {
        self.n_len
    }

    #[wasm_bindgen(getter)]
    pub fn n_spc(&self) -> usize {
        self.n_spc
    }

    /// Row-major `[frame][bin]` magnitudes in dB.
    #[wasm_bindgen(getter)]
    pub fn magnitudes_db(&self) -> Vec<f64> {
        self.magnitudes.clone()
    }
}

/// Chirp from `f_start` to `f_end` plus a steady tone at `f_tone`.
#[wasm_bindgen]
pub fn gabor_round_trip(f_start: f64, f_end: f64, f_tone: f64, duration_s: f64) -> Result<RoundTrip, JsValue> {
    let full = GaborConfig::default();
    let fs = full.sample_rate_hz;
    let n = (duration_s.clamp(0.05, 2.0) * fs) as usize;
    let k = (f_end - f_start) / (2.0 * duration_s);
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let tau = std::f64::consts::TAU;
            (tau * (f_start * t + k * t * t)).sin() + 0.5 * (tau * f_tone * t).sin()
        })
        .collect();
    let signal = TimeSignal::new(x, fs).map_err(err)?;
    let spec = analyze(&signal, &full).map_err(err)?;
    let back = synthesize(&spec).map_err(err)?;
    let num: f64 = signal.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).powi(2)).sum();
    let error = (num / signal.energy()).sqrt();
    let shown = lattice().n_spc;
    let peak = spec.max_abs().max(f64::MIN_POSITIVE);
    let magnitudes = (0..spec.n_len)
        .flat_map(|k| spec.frame(k)[..shown].iter().map(|z| 20.0 * (z.norm() / peak).max(1e-6).log10()).collect::<Vec<_>>())
        .collect();
    Ok(RoundTrip {
        error,
        n_len: spec.n_len,
        n_spc: shown,
        magnitudes,
    })
}
