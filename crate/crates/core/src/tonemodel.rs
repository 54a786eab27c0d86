//! Harmonic tone spectra.
//!
//! A tone with fundamental `f1`, inharmonicity `b` and peak width `sigma`
//! puts a Gaussian bump at each partial `f_h = f1 * h * sqrt(1 + b h^2)`.
//! The same sparse set of bumps serves the dictionary-based spectrum
//! (amplitudes `a * D[h, eta] * exp(i phi_h)`), the direct spectrum (free
//! complex coefficients) and the least-squares basis in `phasesolver`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gabor::GaborConfig;

/// Bumps are evaluated within this many standard deviations of their center.
pub const PEAK_HALF_WIDTH_SIGMAS: f64 = 8.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `f_h = f1 * h * sqrt(1 + b h^2)` for `h = 1..=n_har`.
pub fn harmonic_frequencies(f1: f64, b: f64, n_har: usize) -> Result<Vec<f64>> {
    if !(f1 > 0.0) {
        return Err(Error::Domain(format!("fundamental must be positive, got {f1}")));
    }
    if !(b >= 0.0) {
        return Err(Error::Domain(format!("inharmonicity must be non-negative, got {b}")));
    }
    Ok((1..=n_har)
        .map(|h| {
            let h = h as f64;
            f1 * h * (1.0 + b * h * h).sqrt()
        })
        .collect())
}

/// Relative harmonic amplitudes, one column per instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub n_har: usize,
    pub n_ins: usize,
    /// Row-major `[h][eta]`.
    pub entries: Vec<f64>,
}

impl Dictionary {
    pub fn new(n_har: usize, n_ins: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n_har * n_ins {
            return Err(Error::LengthMismatch {
                expected: n_har * n_ins,
                actual: entries.len(),
            });
        }
        Ok(Self {
            n_har,
            n_ins,
            entries,
        })
    }

    /// Exponentially decaying start value `(0.5 / eta)^(h - 1)` with 1-based
    /// `h` and `eta`.
    pub fn initial(n_har: usize, n_ins: usize) -> Self {
        let mut entries = Vec::with_capacity(n_har * n_ins);
        for h in 0..n_har {
            for eta in 0..n_ins {
                entries.push((0.5 / (eta + 1) as f64).powi(h as i32));
            }
        }
        Self {
            n_har,
            n_ins,
            entries,
        }
    }

    #[inline]
    pub fn raw(&self, h: usize, eta: usize) -> f64 {
        self.entries[h * self.n_ins + eta]
    }

    /// Entry projected onto the non-negative orthant.
    #[inline]
    pub fn get(&self, h: usize, eta: usize) -> f64 {
        self.raw(h, eta).max(0.0)
    }

    pub fn column(&self, eta: usize) -> Vec<f64> {
        (0..self.n_har).map(|h| self.get(h, eta)).collect()
    }

    pub fn project_nonnegative(&mut self) {
        self.entries.iter_mut().for_each(|d| *d = d.max(0.0));
    }
}

/// Parameters of one tone in one frame. Indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneState {
    /// Discrete frequency bin.
    pub nu: usize,
    /// Continuous bin offset in `(-5, 5)`.
    pub nu_tilde: f64,
    pub eta: usize,
    pub b: f64,
    pub a: f64,
    /// Peak width in Hz.
    pub sigma: f64,
    pub u: bool,
    pub coeffs: Vec<Complex64>,
    pub phases: Vec<f64>,
}

impl ToneState {
    pub fn fundamental(&self, beta_hz: f64) -> f64 {
        beta_hz * (self.nu as f64 + self.nu_tilde)
    }

    pub fn peaks(&self, config: &GaborConfig) -> Result<Peaks> {
        Peaks::new(
            self.fundamental(config.beta_hz),
            self.b,
            self.sigma,
            self.coeffs.len().max(self.phases.len()),
            config,
        )
    }
}

/// Sparse Gaussian columns `G[l, h] = exp(-(beta l - f_h)^2 / (2 sigma^2))`.
#[derive(Debug, Clone)]
pub struct Peaks {
    pub f1: f64,
    pub b: f64,
    pub sigma: f64,
    pub freqs: Vec<f64>,
    beta: f64,
    n_spc: usize,
    /// Per harmonic: first bin and the values on the evaluated bins.
    cols: Vec<(usize, Vec<f64>)>,
}

/// Gradients of a scalar with respect to the parameters shaping the peaks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PeakParamGrads {
    pub f1: f64,
    pub b: f64,
    pub sigma: f64,
}

impl std::ops::AddAssign for PeakParamGrads {
    fn add_assign(&mut self, o: Self) {
        self.f1 += o.f1;
        self.b += o.b;
        self.sigma += o.sigma;
    }
}

impl Peaks {
    pub fn new(f1: f64, b: f64, sigma: f64, n_har: usize, config: &GaborConfig) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("peak width must be positive, got {sigma}")));
        }
        let freqs = harmonic_frequencies(f1, b, n_har)?;
        let beta = config.beta_hz;
        let n_spc = config.n_spc;
        let nyquist = n_spc as f64 * beta;
        let reach = PEAK_HALF_WIDTH_SIGMAS * sigma;
        let cols = freqs
            .iter()
            .map(|&f| {
                if f >= nyquist {
                    return (0, Vec::new());
                }
                let lo = ((f - reach) / beta).ceil().max(0.0) as usize;
                let hi = (((f + reach) / beta).floor() as usize).min(n_spc - 1);
                let vals = (lo..=hi)
                    .map(|l| {
                        let d = beta * l as f64 - f;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    })
                    .collect();
                (lo, vals)
            })
            .collect();
        Ok(Self {
            f1,
            b,
            sigma,
            freqs,
            beta,
            n_spc,
            cols,
        })
    }

    pub fn n_har(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_spc(&self) -> usize {
        self.n_spc
    }

    /// Support of column `h` as `(first bin, values)`.
    pub fn column(&self, h: usize) -> (usize, &[f64]) {
        (self.cols[h].0, &self.cols[h].1)
    }

    /// `sum_h amps[h] * G[., h]`.
    pub fn synth(&self, amps: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.n_spc];
        self.synth_into(amps, &mut out);
        out
    }

    pub fn synth_into(&self, amps: &[Complex64], out: &mut [Complex64]) {
        for ((lo, vals), &amp) in self.cols.iter().zip(amps) {
            for (o, g) in out[*lo..*lo + vals.len()].iter_mut().zip(vals) {
                *o += amp * g;
            }
        }
    }

    /// `sum_l conj(G[l, h]) * x[l]` per harmonic (`G` is real).
    pub fn project(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.cols
            .iter()
            .map(|(lo, vals)| vals.iter().zip(&x[*lo..]).map(|(g, v)| v * g).sum())
            .collect()
    }

    /// Backpropagates `dL/dG[l, h]` (given on each column's support) into
    /// `f1`, `b` and `sigma`.
    pub fn param_grads(&self, dg: impl Fn(usize, usize) -> f64) -> PeakParamGrads {
        let s2 = self.sigma * self.sigma;
        let mut out = PeakParamGrads::default();
        for (h, ((lo, vals), &f)) in self.cols.iter().zip(&self.freqs).enumerate() {
            let mut d_f = 0.0;
            for (i, g) in vals.iter().enumerate() {
                let l = lo + i;
                let d = self.beta * l as f64 - f;
                let w = dg(h, l) * g;
                d_f += w * d / s2;
                out.sigma += w * d * d / (s2 * self.sigma);
            }
            let hh = (h + 1) as f64;
            let root = (1.0 + self.b * hh * hh).sqrt();
            out.f1 += d_f * hh * root;
            out.b += d_f * self.f1 * hh * hh * hh / (2.0 * root);
        }
        out
    }

    /// Gradients of `L(synth(amps))` given the upstream `gy = dL/dRe + i dL/dIm`.
    pub fn synth_backward(&self, amps: &[Complex64], gy: &[Complex64]) -> (Vec<Complex64>, PeakParamGrads) {
        let d_amps = self.project(gy);
        let params = self.param_grads(|h, l| (gy[l].conj() * amps[h]).re);
        (d_amps, params)
    }
}

/// Complex amplitudes `a * D[h, eta] * exp(i phi_h)` of the dictionary model.
pub fn dictionary_amplitudes(tone: &ToneState, dict: &Dictionary) -> Vec<Complex64> {
    tone.phases
        .iter()
        .enumerate()
        .map(|(h, &phi)| Complex64::from_polar(tone.a * dict.get(h, tone.eta), phi))
        .collect()
}

/// Dictionary-based spectrum of one tone.
pub fn tone_spectrum_dict(tone: &ToneState, dict: &Dictionary, config: &GaborConfig) -> Result<Vec<Complex64>> {
    if tone.eta >= dict.n_ins {
        return Err(Error::Domain(format!(
            "instrument {} out of range for {} instruments",
            tone.eta, dict.n_ins
        )));
    }
    if tone.phases.len() != dict.n_har {
        return Err(Error::LengthMismatch {
            expected: dict.n_har,
            actual: tone.phases.len(),
        });
    }
    let peaks = Peaks::new(tone.fundamental(config.beta_hz), tone.b, tone.sigma, dict.n_har, config)?;
    Ok(peaks.synth(&dictionary_amplitudes(tone, dict)))
}

/// Direct spectrum of one tone from its free coefficients.
pub fn tone_spectrum_direct(tone: &ToneState, config: &GaborConfig) -> Result<Vec<Complex64>> {
    let peaks = Peaks::new(
        tone.fundamental(config.beta_hz),
        tone.b,
        tone.sigma,
        tone.coeffs.len(),
        config,
    )?;
    Ok(peaks.synth(&tone.coeffs))
}

/// All tones of one frame together with their spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub tones: Vec<ToneState>,
    pub y_dict: Vec<Vec<Complex64>>,
    pub y_dir: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub y: Vec<Complex64>,
    pub y_dir: Vec<Complex64>,
    pub y_spr: Vec<Complex64>,
}

impl FramePrediction {
    pub fn n_spc(&self) -> usize {
        self.y_dict.first().or(self.y_dir.first()).map_or(0, Vec::len)
    }

    /// Sum of dictionary spectra, sum of direct spectra, and the sparse sum
    /// over tones with `u = 1`.
    pub fn aggregate(&self) -> Aggregates {
        let n = self.n_spc();
        let mut y = vec![ZERO; n];
        let mut y_dir = vec![ZERO; n];
        let mut y_spr = vec![ZERO; n];
        for ((tone, yd), ydir) in self.tones.iter().zip(&self.y_dict).zip(&self.y_dir) {
            for l in 0..n {
                y[l] += yd[l];
                y_dir[l] += ydir[l];
                if tone.u {
                    y_spr[l] += yd[l];
                }
            }
        }
        Aggregates { y, y_dir, y_spr }
    }
}
