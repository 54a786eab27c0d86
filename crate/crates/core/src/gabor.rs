//! Sampled short-time Fourier transform with a truncated Gaussian window.
//!
//! Coefficients are taken on the lattice `(alpha * k, beta * l)` with the
//! phase convention that makes the phase of a stationary sinusoid constant
//! within a frame:
//!
//! ```text
//! Z[k, l] = V_w X(alpha k, beta l) * exp(i 2 pi alpha k beta l)
//! ```
//!
//! The lattice has to be sample aligned: `alpha * fs` is an integer hop and
//! `fs / beta` an integer DFT length. The window is cut to
//! `[-1/(2 beta), 1/(2 beta))`, which is exactly one DFT length, so every
//! frame is one forward FFT and resynthesis is one inverse FFT followed by an
//! overlap-add with the canonical dual window.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// DFT length (in samples) of the default lattice, independent of the
/// sample rate: `beta = fs / 12288`.
pub const DEFAULT_DFT_LEN: usize = 12288;
/// Window scale of the default lattice in seconds (1024 samples at 48 kHz).
pub const DEFAULT_ZETA_S: f64 = 1024.0 / 48000.0;
/// Time step of the default lattice in seconds (512 samples at 48 kHz).
pub const DEFAULT_ALPHA_S: f64 = 512.0 / 48000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborConfig {
    pub sample_rate_hz: f64,
    /// Standard deviation of the Gaussian window, seconds.
    pub zeta_s: f64,
    /// Frame step, seconds.
    pub alpha_s: f64,
    /// Frequency bin spacing, Hz.
    pub beta_hz: f64,
    /// Number of stored (non-negative) frequency bins.
    pub n_spc: usize,
}

impl Default for GaborConfig {
    fn default() -> Self {
        Self::for_sample_rate(48000.0)
    }
}

impl GaborConfig {
    /// Default lattice for a given sample rate.
    ///
    /// `zeta` keeps its absolute value in seconds, `alpha` keeps its absolute
    /// value rounded to whole samples, and `beta` scales with the sample rate
    /// so the DFT length stays 12288 samples. `n_spc` covers everything up to
    /// Nyquist.
    pub fn for_sample_rate(sample_rate_hz: f64) -> Self {
        let hop = (DEFAULT_ALPHA_S * sample_rate_hz).round().max(1.0);
        Self {
            sample_rate_hz,
            zeta_s: DEFAULT_ZETA_S,
            alpha_s: hop / sample_rate_hz,
            beta_hz: sample_rate_hz / DEFAULT_DFT_LEN as f64,
            n_spc: DEFAULT_DFT_LEN / 2,
        }
    }

    /// Same lattice with the frame step divided by `factor` (training-time
    /// augmentation).
    pub fn with_time_step_divided(&self, factor: usize) -> Result<Self> {
        let hop = self.hop_samples()?;
        if factor == 0 || hop % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "hop of {hop} samples is not divisible by augmentation factor {factor}"
            )));
        }
        Ok(Self {
            alpha_s: (hop / factor) as f64 / self.sample_rate_hz,
            ..*self
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad(format!("sample rate must be positive, got {}", self.sample_rate_hz));
        }
        if !(self.zeta_s > 0.0 && self.alpha_s > 0.0 && self.beta_hz > 0.0) {
            return bad("zeta, alpha and beta must be positive".into());
        }
        if self.alpha_s * self.beta_hz >= 1.0 {
            return bad(format!(
                "alpha * beta = {} violates the frame condition alpha * beta < 1",
                self.alpha_s * self.beta_hz
            ));
        }
        if self.n_spc == 0 {
            return bad("n_spc must be at least 1".into());
        }
        if self.n_spc as f64 * self.beta_hz > self.sample_rate_hz / 2.0 + 1e-9 {
            return bad(format!(
                "{} bins of {} Hz exceed the Nyquist frequency {}",
                self.n_spc,
                self.beta_hz,
                self.sample_rate_hz / 2.0
            ));
        }
        self.hop_samples()?;
        self.dft_len()?;
        Ok(())
    }

    /// Frame step in samples.
    pub fn hop_samples(&self) -> Result<usize> {
        integral(self.alpha_s * self.sample_rate_hz, "alpha * fs")
    }

    /// DFT length in samples; equals the window support.
    pub fn dft_len(&self) -> Result<usize> {
        let n = integral(self.sample_rate_hz / self.beta_hz, "fs / beta")?;
        if n % 2 != 0 {
            return Err(Error::InvalidConfig(format!("fs / beta = {n} must be even")));
        }
        Ok(n)
    }

    /// Peak width of a stationary sinusoid in the spectrum, `1 / (2 pi zeta)`.
    pub fn sigma_hz(&self) -> f64 {
        1.0 / (2.0 * PI * self.zeta_s)
    }

    /// Half width of the truncated window support in seconds.
    pub fn half_support_s(&self) -> f64 {
        0.5 / self.beta_hz
    }

    /// Number of frames needed so that every sample lies within one hop of a
    /// frame center.
    pub fn n_len(&self, n_samples: usize) -> Result<usize> {
        let hop = self.hop_samples()?;
        Ok(n_samples.div_ceil(hop).max(1))
    }

    /// Truncated, unit-integral Gaussian analysis window.
    pub fn gaussian_window(&self, t: f64) -> f64 {
        if t.abs() > self.half_support_s() {
            return 0.0;
        }
        (-t * t / (2.0 * self.zeta_s * self.zeta_s)).exp() / (2.0 * PI * self.zeta_s * self.zeta_s).sqrt()
    }

    /// Synthesis window for the infinite lattice `alpha * Z`:
    /// `beta * w(t) / sum_k w(t - alpha k)^2`.
    pub fn dual_window(&self, t: f64) -> f64 {
        let w = self.gaussian_window(t);
        if w == 0.0 {
            return 0.0;
        }
        let s = self.half_support_s();
        let k_lo = ((t - s) / self.alpha_s).floor() as i64;
        let k_hi = ((t + s) / self.alpha_s).ceil() as i64;
        let den: f64 = (k_lo..=k_hi)
            .map(|k| self.gaussian_window(t - self.alpha_s * k as f64).powi(2))
            .sum();
        self.beta_hz * w / den
    }
}

fn integral(x: f64, what: &str) -> Result<usize> {
    let r = x.round();
    if r < 1.0 || (x - r).abs() > 1e-6 * r.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "{what} = {x} must be a positive integer (sample-aligned lattice)"
        )));
    }
    Ok(r as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("signal contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }
}

/// Complex coefficient grid, row-major `[n_len][n_spc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub config: GaborConfig,
    pub n_len: usize,
    /// Length of the time signal the grid describes.
    pub n_samples: usize,
    pub data: Vec<Complex64>,
    /// Real part of DFT bin `N/2` per frame. It lies outside the modelled
    /// bins but is kept so that resynthesis of an analysed signal is exact
    /// where the window meets the signal edges.
    pub nyquist: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros(config: GaborConfig, n_len: usize, n_samples: usize) -> Self {
        Self {
            config,
            n_len,
            n_samples,
            data: vec![Complex64::new(0.0, 0.0); n_len * config.n_spc],
            nyquist: vec![0.0; n_len],
        }
    }

    pub fn n_spc(&self) -> usize {
        self.config.n_spc
    }

    pub fn frame(&self, k: usize) -> &[Complex64] {
        let n = self.config.n_spc;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [Complex64] {
        let n = self.config.n_spc;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|z| *z *= factor);
        self.nyquist.iter_mut().for_each(|z| *z *= factor);
    }
}

/// Window samples `w(m / fs) / fs` indexed by DFT slot: slot `j < N/2` holds
/// offset `m = j`, slot `j >= N/2` holds `m = j - N`.
fn window_slots(config: &GaborConfig, n: usize) -> Vec<f64> {
    let fs = config.sample_rate_hz;
    (0..n)
        .map(|j| {
            let m = slot_offset(j, n);
            config.gaussian_window(m as f64 / fs) / fs
        })
        .collect()
}

#[inline]
fn slot_offset(j: usize, n: usize) -> i64 {
    if j < n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Analysis of a real signal.
pub fn analyze(signal: &TimeSignal, config: &GaborConfig) -> Result<Spectrogram> {
    check_rate(signal.sample_rate_hz, config)?;
    analyze_with(signal.len(), config, |n| Complex64::new(signal.samples[n], 0.0))
}

/// Analysis of a complex signal, used to check the closed-form spectrum of
/// the one-sided tone model.
pub fn analyze_complex(samples: &[Complex64], config: &GaborConfig) -> Result<Spectrogram> {
    analyze_with(samples.len(), config, |n| samples[n])
}

fn check_rate(rate: f64, config: &GaborConfig) -> Result<()> {
    if (rate - config.sample_rate_hz).abs() > 1e-9 * rate {
        return Err(Error::ConfigMismatch(format!(
            "signal sampled at {rate} Hz, lattice expects {} Hz",
            config.sample_rate_hz
        )));
    }
    Ok(())
}

fn analyze_with(
    len: usize,
    config: &GaborConfig,
    sample: impl Fn(usize) -> Complex64,
) -> Result<Spectrogram> {
    config.validate()?;
    if len == 0 {
        return Err(Error::SignalTooShort("empty signal has no frames".into()));
    }
    let hop = config.hop_samples()?;
    let n = config.dft_len()?;
    let n_len = config.n_len(len)?;
    let window = window_slots(config, n);
    let fft = plan(n, false);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Spectrogram::zeros(*config, n_len, len);

    for k in 0..n_len {
        let center = (k * hop) as i64;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = center + slot_offset(j, n);
            *slot = if idx >= 0 && (idx as usize) < len {
                sample(idx as usize) * window[j]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.frame_mut(k).copy_from_slice(&buf[..config.n_spc]);
        out.nyquist[k] = buf[n / 2].re;
    }
    Ok(out)
}

/// Resynthesis by overlap-add with the canonical dual window.
///
/// Only non-negative bins are stored, so bins `l > 0` are doubled and the
/// real part is taken. The dual window normalizes by the squared windows of
/// the frames that are actually present, which makes `synthesize(analyze(x))`
/// exact at the signal edges too.
pub fn synthesize(spec: &Spectrogram) -> Result<TimeSignal> {
    let config = &spec.config;
    config.validate()?;
    let hop = config.hop_samples()?;
    let n = config.dft_len()?;
    let len = spec.n_samples;
    let fs = config.sample_rate_hz;
    let window: Vec<f64> = (0..n)
        .map(|j| config.gaussian_window(slot_offset(j, n) as f64 / fs))
        .collect();

    let mut den = vec![0.0; len];
    for k in 0..spec.n_len {
        let center = (k * hop) as i64;
        for (j, w) in window.iter().enumerate() {
            let idx = center + slot_offset(j, n);
            if idx >= 0 && (idx as usize) < len {
                den[idx as usize] += w * w;
            }
        }
    }

    let fft = plan(n, true);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![0.0; len];
    for k in 0..spec.n_len {
        let frame = spec.frame(k);
        let nyquist = spec.nyquist.get(k).copied().unwrap_or(0.0);
        if nyquist == 0.0 && frame.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
            continue;
        }
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        buf[0] = frame[0];
        for l in 1..config.n_spc {
            buf[l] = frame[l] * 2.0;
        }
        buf[n / 2] += nyquist;
        fft.process_with_scratch(&mut buf, &mut scratch);
        let center = (k * hop) as i64;
        for (j, w) in window.iter().enumerate() {
            let idx = center + slot_offset(j, n);
            if idx >= 0 && (idx as usize) < len {
                let d = den[idx as usize];
                if d > 0.0 {
                    out[idx as usize] += buf[j].re * config.beta_hz * w / d;
                }
            }
        }
    }
    TimeSignal::new(out, fs)
}
