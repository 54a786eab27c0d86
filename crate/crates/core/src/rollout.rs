//! One frame of sequential tone extraction.
//!
//! Tone `j` is predicted by a network call on the residuals of the previous
//! `j` tones, its stochastic parameters are drawn, and its dictionary and
//! direct spectra are formed. The first call does not depend on any draw and
//! is shared by all samples of a frame; later calls are per sample.
//!
//! The backward pass seeds each call's raw outputs with
//! `dL_i/S + POLICY_SCALE (L_i - C)/S * d log pi^{R_i}` and pushes input
//! gradients back into the spectra of earlier tones.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gabor::GaborConfig;
use crate::network::{CategoricalMask, Head, HeadMapping, HeadOutputs, MappedHeads, UNet, UNetCache, UNetConfig};
use crate::objectives::{total_loss_grad, LossConfig, LossParts};
use crate::phasesolver::{extract_phases, phase_backward, solve, solve_backward, PeakBasis, Regularization, Solved};
use crate::policy::{
    add_log_density_grad, evaluate_tone, mode_tone, normalized_importance_weights, policy_weights, sample_tone,
    LiftScheme, SampledTone, ToneDraw,
};
use crate::tonemodel::{Dictionary, FramePrediction, Peaks, ToneState};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const NOISE_STREAM: u64 = 0x6e6f_6973_65;

/// `ln 1e4`: an untrained network draws inharmonicity of order 1e-4, the
/// range of real strings, instead of order 1.
pub const DEFAULT_LOG_RATE_OFFSET: f64 = 9.210340371976184;

/// Everything that fixes the model apart from its trainable values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Reconstruction lattice; training may use a finer time step.
    pub gabor: GaborConfig,
    pub unet: UNetConfig,
    pub n_har: usize,
    /// Admissible discrete fundamental bins, inclusive.
    pub nu_min: usize,
    pub nu_max: usize,
    pub loss: LossConfig,
    pub regularization: Regularization,
    /// Standard deviation of the noise added to unit-normalized input spectra.
    pub input_noise: f64,
    pub lift: LiftScheme,
    /// Log prior on the inharmonicity rate; see [`HeadMapping::log_rate_offset`].
    pub log_rate_offset: f64,
}

impl ModelConfig {
    pub fn paper(n_ins: usize) -> Self {
        Self {
            gabor: GaborConfig::default(),
            unet: UNetConfig::paper(n_ins),
            n_har: 16,
            nu_min: 10,
            nu_max: 3000,
            loss: LossConfig::default(),
            regularization: Regularization::default(),
            input_noise: 1e-6,
            lift: LiftScheme::default(),
            log_rate_offset: DEFAULT_LOG_RATE_OFFSET,
        }
    }

    pub fn n_ins(&self) -> usize {
        self.unet.n_ins
    }

    pub fn mapping(&self) -> HeadMapping {
        HeadMapping {
            log_rate_offset: self.log_rate_offset,
            ..HeadMapping::for_window(self.gabor.sigma_hz())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gabor.validate()?;
        self.unet.validate()?;
        self.unet.check_length(self.gabor.n_spc)?;
        self.loss.validate()?;
        self.lift.validate()?;
        if self.n_har == 0 {
            return Err(Error::InvalidConfig("n_har must be at least 1".into()));
        }
        if (self.nu_min as f64) <= self.mapping().nu_tilde_max {
            return Err(Error::InvalidConfig(format!(
                "nu_min must exceed the offset bound {} so fundamentals stay positive",
                self.mapping().nu_tilde_max
            )));
        }
        if self.nu_min > self.nu_max || self.nu_min >= self.gabor.n_spc {
            return Err(Error::InvalidConfig("need nu_min <= nu_max and nu_min < n_spc".into()));
        }
        if !(self.input_noise >= 0.0) {
            return Err(Error::InvalidConfig("input_noise must be non-negative".into()));
        }
        Ok(())
    }

    fn mask(&self, assigned: Vec<bool>) -> CategoricalMask {
        CategoricalMask {
            nu_min: self.nu_min,
            nu_max: self.nu_max.min(self.gabor.n_spc - 1),
            assigned,
        }
    }
}

/// Deterministic seed from a tuple of counters (SplitMix64 chain).
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(parts))
}

fn gaussian_noise(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<Complex64> {
    if std == 0.0 {
        return vec![ZERO; n];
    }
    let mut normal = || {
        let u1 = 1.0 - rng.random::<f64>();
        let u2 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        (r * t.cos(), r * t.sin())
    };
    (0..n)
        .map(|_| {
            let (a, b) = normal();
            Complex64::new(std * a, std * b)
        })
        .collect()
}

/// Network input for the next tone: both residuals, their magnitudes and
/// the spectra of the tones extracted so far (zero for empty slots).
fn build_input(y: &[Complex64], prev: &[(Vec<Complex64>, Vec<Complex64>)], n_ins: usize) -> Vec<f64> {
    let n = y.len();
    let mut res = y.to_vec();
    let mut res_dir = y.to_vec();
    for (yd, ydir) in prev {
        for l in 0..n {
            res[l] -= yd[l];
            res_dir[l] -= ydir[l];
        }
    }
    let slots = n_ins.saturating_sub(1);
    let mut x = vec![0.0; (6 + 4 * slots) * n];
    for l in 0..n {
        x[l] = res[l].re;
        x[n + l] = res[l].im;
        x[2 * n + l] = res_dir[l].re;
        x[3 * n + l] = res_dir[l].im;
        x[4 * n + l] = res[l].norm();
        x[5 * n + l] = res_dir[l].norm();
    }
    for (s, (yd, ydir)) in prev.iter().enumerate().take(slots) {
        let base = (6 + 4 * s) * n;
        for l in 0..n {
            x[base + l] = yd[l].re;
            x[base + n + l] = yd[l].im;
            x[base + 2 * n + l] = ydir[l].re;
            x[base + 3 * n + l] = ydir[l].im;
        }
    }
    x
}

/// Adds the gradient of [`build_input`] into the per-tone spectrum gradients.
fn input_backward(
    y: &[Complex64],
    prev: &[(Vec<Complex64>, Vec<Complex64>)],
    dx: &[f64],
    gy_dict: &mut [Vec<Complex64>],
    gy_dir: &mut [Vec<Complex64>],
) {
    let n = y.len();
    let mut res = y.to_vec();
    let mut res_dir = y.to_vec();
    for (yd, ydir) in prev {
        for l in 0..n {
            res[l] -= yd[l];
            res_dir[l] -= ydir[l];
        }
    }
    let unit = |z: Complex64| {
        let m = z.norm();
        if m > 0.0 {
            z / m
        } else {
            ZERO
        }
    };
    for l in 0..n {
        let d_res = Complex64::new(dx[l], dx[n + l]) + unit(res[l]) * dx[4 * n + l];
        let d_res_dir = Complex64::new(dx[2 * n + l], dx[3 * n + l]) + unit(res_dir[l]) * dx[5 * n + l];
        for s in 0..prev.len() {
            gy_dict[s][l] -= d_res;
            gy_dir[s][l] -= d_res_dir;
        }
    }
    for s in 0..prev.len() {
        let base = (6 + 4 * s) * n;
        if base >= dx.len() {
            break;
        }
        for l in 0..n {
            gy_dict[s][l] += Complex64::new(dx[base + l], dx[base + n + l]);
            gy_dir[s][l] += Complex64::new(dx[base + 2 * n + l], dx[base + 3 * n + l]);
        }
    }
}

/// A tone after its parameters are fixed.
#[derive(Debug, Clone)]
struct ToneEval {
    sampled: SampledTone,
    r: f64,
    mask: CategoricalMask,
    basis: PeakBasis,
    v: Vec<Complex64>,
    solved: Solved,
    phases: Vec<f64>,
    amps: Vec<Complex64>,
    y_dict: Vec<Complex64>,
    y_dir: Vec<Complex64>,
}

impl ToneEval {
    fn new(
        cfg: &ModelConfig,
        dict: &Dictionary,
        out: &HeadOutputs,
        sampled: SampledTone,
        r: f64,
        mask: CategoricalMask,
    ) -> Result<Self> {
        let ToneDraw { nu, eta, b, .. } = sampled.draw;
        let h = sampled.heads;
        let f1 = cfg.gabor.beta_hz * (nu as f64 + h.nu_tilde);
        let peaks = Peaks::new(f1, b, h.sigma, cfg.n_har, &cfg.gabor)?;
        let basis = PeakBasis::new(peaks);
        let v = out.v(eta);
        let solved = solve(&basis, &v, cfg.regularization);
        let phases = extract_phases(&solved.coeffs);
        let amps: Vec<Complex64> = phases
            .iter()
            .enumerate()
            .map(|(k, &phi)| Complex64::from_polar(h.a * dict.get(k, eta), phi))
            .collect();
        let y_dict = basis.peaks.synth(&amps);
        let y_dir = basis.peaks.synth(&solved.coeffs);
        Ok(Self {
            sampled,
            r,
            mask,
            basis,
            v,
            solved,
            phases,
            amps,
            y_dict,
            y_dir,
        })
    }

    fn state(&self) -> ToneState {
        let d = self.sampled.draw;
        let h = self.sampled.heads;
        ToneState {
            nu: d.nu,
            nu_tilde: h.nu_tilde,
            eta: d.eta,
            b: d.b,
            a: h.a,
            sigma: h.sigma,
            u: d.u,
            coeffs: self.solved.coeffs.clone(),
            phases: self.phases.clone(),
        }
    }

    /// Backpropagates spectrum gradients into the deterministic heads.
    fn backward(
        &self,
        cfg: &ModelConfig,
        mapping: &HeadMapping,
        dict: &Dictionary,
        out: &HeadOutputs,
        gy_dict: &[Complex64],
        gy_dir: &[Complex64],
        d_out: &mut HeadOutputs,
    ) {
        let peaks = &self.basis.peaks;
        let ToneDraw { nu, eta, .. } = self.sampled.draw;
        let (d_amps, mut pg) = peaks.synth_backward(&self.amps, gy_dict);
        let mut d_a = 0.0;
        let mut d_phase = vec![0.0; self.amps.len()];
        for (k, (da, amp)) in d_amps.iter().zip(&self.amps).enumerate() {
            let unit = Complex64::from_polar(dict.get(k, eta), self.phases[k]);
            d_a += (da.conj() * unit).re;
            d_phase[k] = (da.conj() * Complex64::new(-amp.im, amp.re)).re;
        }
        let (mut d_c, pg_dir) = peaks.synth_backward(&self.solved.coeffs, gy_dir);
        pg += pg_dir;
        for (dc, dp) in d_c.iter_mut().zip(phase_backward(&self.solved.coeffs, &d_phase)) {
            *dc += dp;
        }
        let sg = solve_backward(&self.basis, &self.v, &self.solved, &d_c);
        pg += sg.params;

        let raw = |head| out.get(head, nu, eta);
        *d_out.at_mut(Head::Amplitude, nu, eta) += d_a * mapping.d_amplitude(raw(Head::Amplitude));
        *d_out.at_mut(Head::Sigma, nu, eta) += pg.sigma * mapping.d_sigma(raw(Head::Sigma));
        *d_out.at_mut(Head::NuTilde, nu, eta) +=
            pg.f1 * cfg.gabor.beta_hz * mapping.d_nu_tilde(raw(Head::NuTilde));
        d_out.add_v(eta, &sg.v);
    }

    /// `dL/dD` through this tone's dictionary spectrum only.
    fn dict_grad(&self, gy_dict: &[Complex64], n_ins: usize, grad: &mut [f64]) {
        let eta = self.sampled.draw.eta;
        let a = self.sampled.heads.a;
        for (k, da) in self.basis.peaks.project(gy_dict).iter().enumerate() {
            grad[k * n_ins + eta] += (da.conj() * Complex64::from_polar(a, self.phases[k])).re;
        }
    }
}

/// How the stochastic parameters of one sample are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum DrawSource {
    /// Fresh draws from the lifted policy; tone `j` uses `stream(seed, j)`.
    Sample { seed: u64 },
    /// Given draws (for testing); must be admissible.
    Fixed(Vec<ToneDraw>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    /// Lift exponent per tone.
    pub lifts: Vec<f64>,
    pub source: DrawSource,
}

impl SamplePlan {
    /// One plan per lift combination of `scheme`, seeded from `base`.
    pub fn lifted(scheme: &LiftScheme, m: usize, base: &[u64]) -> Vec<SamplePlan> {
        scheme
            .combinations(m)
            .into_iter()
            .enumerate()
            .map(|(i, lifts)| {
                let mut parts = base.to_vec();
                parts.push(i as u64);
                SamplePlan {
                    lifts,
                    source: DrawSource::Sample {
                        seed: stream_seed(&parts),
                    },
                }
            })
            .collect()
    }
}

struct SampleRecord {
    tones: Vec<ToneEval>,
    /// Network call per tone; `None` for the shared first call.
    calls: Vec<Option<(HeadOutputs, UNetCache)>>,
    prediction: FramePrediction,
    loss: f64,
    parts: LossParts,
    gy_dict: Vec<Vec<Complex64>>,
    gy_dir: Vec<Vec<Complex64>>,
}

/// Summary of one frame's samples.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub losses: Vec<f64>,
    pub parts: Vec<LossParts>,
    pub predictions: Vec<FramePrediction>,
    /// Normalized importance weights `rho_i / sum rho`.
    pub weights: Vec<f64>,
    /// Importance-weighted `dL/dD`, row-major like the dictionary.
    pub dict_grad: Vec<f64>,
}

impl FrameOutcome {
    pub fn mean_parts(&self) -> LossParts {
        let s = self.parts.len().max(1) as f64;
        let mut p = LossParts::default();
        for q in &self.parts {
            p.sparse_abs += q.sparse_abs / s;
            p.direct_rad += q.direct_rad / s;
            p.regularizer += q.regularizer / s;
        }
        p
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }
}

fn noisy_input(cfg: &ModelConfig, y: &[Complex64], noise_seed: u64) -> Vec<Complex64> {
    let noise = gaussian_noise(&mut stream(&[NOISE_STREAM, noise_seed]), y.len(), cfg.input_noise);
    y.iter().zip(noise).map(|(a, b)| a + b).collect()
}

fn check_frame(cfg: &ModelConfig, net: &UNet, dict: &Dictionary, y: &[Complex64]) -> Result<()> {
    if y.len() != cfg.gabor.n_spc {
        return Err(Error::LengthMismatch {
            expected: cfg.gabor.n_spc,
            actual: y.len(),
        });
    }
    if net.cfg != cfg.unet {
        return Err(Error::ConfigMismatch("network shape differs from the model config".into()));
    }
    if dict.n_har != cfg.n_har || dict.n_ins != cfg.n_ins() {
        return Err(Error::ConfigMismatch(format!(
            "dictionary is {}x{}, model expects {}x{}",
            dict.n_har,
            dict.n_ins,
            cfg.n_har,
            cfg.n_ins()
        )));
    }
    Ok(())
}

fn run_sample(
    cfg: &ModelConfig,
    net: &UNet,
    dict: &Dictionary,
    y: &[Complex64],
    y_in: &[Complex64],
    first: &HeadOutputs,
    plan: &SamplePlan,
) -> Result<SampleRecord> {
    let m = cfg.n_ins();
    let n = y.len();
    let mapping = cfg.mapping();
    if plan.lifts.len() != m {
        return Err(Error::ShapeMismatch(format!("{} lift exponents for {m} tones", plan.lifts.len())));
    }
    let mut assigned = vec![false; m];
    let mut prev: Vec<(Vec<Complex64>, Vec<Complex64>)> = Vec::with_capacity(m);
    let mut tones = Vec::with_capacity(m);
    let mut calls = Vec::with_capacity(m);
    for j in 0..m {
        let call = if j == 0 {
            None
        } else {
            let x = build_input(y_in, &prev, m);
            Some(net.forward(&x, n)?)
        };
        let out = call.as_ref().map_or(first, |c| &c.0);
        let mask = cfg.mask(assigned.clone());
        let r = plan.lifts[j];
        let sampled = match &plan.source {
            DrawSource::Sample { seed } => sample_tone(out, &mask, &mapping, r, &mut stream(&[*seed, j as u64]))?,
            DrawSource::Fixed(draws) => evaluate_tone(out, &mask, &mapping, r, draws[j])?,
        };
        let tone = ToneEval::new(cfg, dict, out, sampled, r, mask)?;
        assigned[tone.sampled.draw.eta] = true;
        prev.push((tone.y_dict.clone(), tone.y_dir.clone()));
        tones.push(tone);
        calls.push(call);
    }
    let prediction = FramePrediction {
        tones: tones.iter().map(ToneEval::state).collect(),
        y_dict: tones.iter().map(|t| t.y_dict.clone()).collect(),
        y_dir: tones.iter().map(|t| t.y_dir.clone()).collect(),
    };
    let lg = total_loss_grad(&prediction, y, &cfg.loss)?;
    Ok(SampleRecord {
        tones,
        calls,
        prediction,
        loss: lg.value,
        parts: lg.parts,
        gy_dict: lg.y_dict,
        gy_dir: lg.y_dir,
    })
}

/// Losses of each planned sample, without gradients.
pub fn frame_losses(
    cfg: &ModelConfig,
    net: &UNet,
    dict: &Dictionary,
    y: &[Complex64],
    noise_seed: u64,
    plans: &[SamplePlan],
) -> Result<Vec<f64>> {
    check_frame(cfg, net, dict, y)?;
    let y_in = noisy_input(cfg, y, noise_seed);
    let (first, _) = net.forward(&build_input(&y_in, &[], cfg.n_ins()), y.len())?;
    plans
        .iter()
        .map(|p| run_sample(cfg, net, dict, y, &y_in, &first, p).map(|r| r.loss))
        .collect()
}

/// Runs every planned sample on frame `y`, accumulates the combined
/// estimator into the network's gradients and returns the weighted
/// dictionary gradient.
pub fn frame_gradient(
    cfg: &ModelConfig,
    net: &mut UNet,
    dict: &Dictionary,
    y: &[Complex64],
    noise_seed: u64,
    plans: &[SamplePlan],
) -> Result<FrameOutcome> {
    check_frame(cfg, net, dict, y)?;
    if plans.is_empty() {
        return Err(Error::InvalidConfig("at least one sample per frame required".into()));
    }
    let m = cfg.n_ins();
    let n = y.len();
    let mapping = cfg.mapping();
    let y_in = noisy_input(cfg, y, noise_seed);
    let (first, first_cache) = net.forward(&build_input(&y_in, &[], m), n)?;
    let mut records = Vec::with_capacity(plans.len());
    for p in plans {
        records.push(run_sample(cfg, net, dict, y, &y_in, &first, p)?);
    }

    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let pw = policy_weights(&losses);
    let s = plans.len() as f64;
    let log_pi: Vec<f64> = records.iter().map(|r| r.tones.iter().map(|t| t.sampled.log_pi).sum()).collect();
    let log_lifted: Vec<f64> = records
        .iter()
        .map(|r| r.tones.iter().map(|t| t.sampled.log_pi_lifted).sum())
        .collect();
    let weights = normalized_importance_weights(&log_pi, &log_lifted);

    let mut dict_grad = vec![0.0; dict.entries.len()];
    let mut d_first = first.zeros_like();
    for (i, rec) in records.iter().enumerate() {
        for (t, g) in rec.tones.iter().zip(&rec.gy_dict) {
            let mut gi = vec![0.0; dict_grad.len()];
            t.dict_grad(g, m, &mut gi);
            dict_grad.iter_mut().zip(gi).for_each(|(a, b)| *a += weights[i] * b);
        }
        let mut gy_dict: Vec<Vec<Complex64>> =
            rec.gy_dict.iter().map(|g| g.iter().map(|z| z / s).collect()).collect();
        let mut gy_dir: Vec<Vec<Complex64>> = rec.gy_dir.iter().map(|g| g.iter().map(|z| z / s).collect()).collect();
        let prev: Vec<(Vec<Complex64>, Vec<Complex64>)> =
            rec.tones.iter().map(|t| (t.y_dict.clone(), t.y_dir.clone())).collect();
        for j in (0..m).rev() {
            let tone = &rec.tones[j];
            let out = rec.calls[j].as_ref().map_or(&first, |c| &c.0);
            let mut d_out = out.zeros_like();
            tone.backward(cfg, &mapping, dict, out, &gy_dict[j], &gy_dir[j], &mut d_out);
            add_log_density_grad(out, &tone.mask, &mapping, tone.r, tone.sampled.draw, pw[i], &mut d_out);
            match &rec.calls[j] {
                None => d_first.data.iter_mut().zip(&d_out.data).for_each(|(a, b)| *a += b),
                Some((_, cache)) => {
                    let dx = net.backward(cache, &d_out, true).expect("input gradient requested");
                    let (gd, gr) = (&mut gy_dict[..j], &mut gy_dir[..j]);
                    input_backward(&y_in, &prev[..j], &dx, gd, gr);
                }
            }
        }
    }
    net.backward(&first_cache, &d_first, false);

    Ok(FrameOutcome {
        parts: records.iter().map(|r| r.parts).collect(),
        predictions: records.into_iter().map(|r| r.prediction).collect(),
        losses,
        weights,
        dict_grad,
    })
}

/// Deterministic decoding: modes of the policy, fixed input noise.
pub fn decode_frame(cfg: &ModelConfig, net: &UNet, dict: &Dictionary, y: &[Complex64]) -> Result<FramePrediction> {
    check_frame(cfg, net, dict, y)?;
    let m = cfg.n_ins();
    let n = y.len();
    let mapping = cfg.mapping();
    let y_in = noisy_input(cfg, y, 0);
    let mut assigned = vec![false; m];
    let mut prev: Vec<(Vec<Complex64>, Vec<Complex64>)> = Vec::with_capacity(m);
    let mut tones = Vec::with_capacity(m);
    for _ in 0..m {
        let (out, _) = net.forward(&build_input(&y_in, &prev, m), n)?;
        let mask = cfg.mask(assigned.clone());
        let (draw, heads): (ToneDraw, MappedHeads) = mode_tone(&out, &mask, &mapping)?;
        let sampled = SampledTone {
            draw,
            heads,
            log_pi: 0.0,
            log_pi_lifted: 0.0,
        };
        let tone = ToneEval::new(cfg, dict, &out, sampled, 1.0, mask)?;
        assigned[draw.eta] = true;
        prev.push((tone.y_dict.clone(), tone.y_dir.clone()));
        tones.push(tone);
    }
    Ok(FramePrediction {
        tones: tones.iter().map(ToneEval::state).collect(),
        y_dict: tones.iter().map(|t| t.y_dict.clone()).collect(),
        y_dir: tones.iter().map(|t| t.y_dir.clone()).collect(),
    })
}
