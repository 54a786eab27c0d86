//! Tone sampling distributions, lifted exploration and the gradient
//! estimators.
//!
//! Per tone the policy is a joint categorical over `(nu, eta)`, a gamma
//! density for the inharmonicity `b` and a Bernoulli for the presence flag
//! `u`. Lifting by an exponent `r < 1` flattens the categorical and the
//! Bernoulli; `b` is never lifted.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{masked_log_softmax, sigmoid, softplus, CategoricalMask, Head, HeadMapping, HeadOutputs, MappedHeads};
use crate::special::{digamma, ln_gamma};

pub const LIFT_VALUES: [f64; 3] = [1.0, 0.1, 0.01];

/// Weight of the policy term relative to the backpropagation term.
pub const POLICY_SCALE: f64 = 0.1;

/// All combinations of lift exponents over the tones of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftScheme {
    pub r_values: Vec<f64>,
}

impl Default for LiftScheme {
    fn default() -> Self {
        Self {
            r_values: LIFT_VALUES.to_vec(),
        }
    }
}

impl LiftScheme {
    pub fn validate(&self) -> Result<()> {
        if self.r_values.first() != Some(&1.0) {
            return Err(Error::InvalidConfig("first lift exponent must be 1".into()));
        }
        if self.r_values.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidConfig("lift exponents must lie in (0, 1]".into()));
        }
        if self.r_values[1..].contains(&1.0) {
            return Err(Error::InvalidConfig("lift exponents must be distinct".into()));
        }
        Ok(())
    }

    /// `r_values.len()^m` exponent vectors; index 0 is all ones.
    pub fn combinations(&self, m: usize) -> Vec<Vec<f64>> {
        let k = self.r_values.len();
        let s = k.pow(m as u32);
        (0..s)
            .map(|mut i| {
                (0..m)
                    .map(|_| {
                        let r = self.r_values[i % k];
                        i /= k;
                        r
                    })
                    .collect()
            })
            .collect()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(p^r / sum p^r)` from `log p`; `-inf` entries stay excluded.
pub fn lifted_log_probs(log_p: &[f64], r: f64) -> Vec<f64> {
    let lse = log_sum_exp(log_p.iter().filter(|v| v.is_finite()).map(|v| r * v));
    log_p
        .iter()
        .map(|&v| if v.is_finite() { r * v - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// `p^r / (p^r + (1 - p)^r)`.
pub fn lifted_bernoulli(p: f64, r: f64) -> f64 {
    let (a, b) = (p.powf(r), (1.0 - p).powf(r));
    a / (a + b)
}

/// Parameters of the gamma density proportional to `Gamma(alpha, beta)^r`.
pub fn lifted_gamma_params(alpha: f64, beta: f64, r: f64) -> (f64, f64) {
    (r * (alpha - 1.0) + 1.0, r * beta)
}

/// Log-density of the gamma distribution with shape `alpha` and rate `beta`.
pub fn gamma_log_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    if x == 0.0 {
        return match alpha.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => beta.ln(),
            _ => f64::NEG_INFINITY,
        };
    }
    alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * x.ln() - beta * x
}

/// Density maximizer; zero when the density is unbounded at the origin.
pub fn gamma_mode(alpha: f64, beta: f64) -> f64 {
    if alpha >= 1.0 {
        (alpha - 1.0) / beta
    } else {
        0.0
    }
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let (u1, u2) = (open_unit(rng), rng.random::<f64>());
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Marsaglia-Tsang squeeze/rejection for shape `>= 1`.
fn standard_gamma_ge1<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_unit(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Draw from `Gamma(alpha, beta)` (rate parametrization), valid for every
/// `alpha > 0`. Results are clamped to the smallest positive normal.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> f64 {
    let x = if alpha < 1.0 {
        let g = standard_gamma_ge1(rng, alpha + 1.0);
        (g.ln() + open_unit(rng).ln() / alpha).exp()
    } else {
        standard_gamma_ge1(rng, alpha)
    };
    (x / beta).max(f64::MIN_POSITIVE)
}

/// Inverse-CDF draw from log-probabilities (entries at `-inf` never drawn).
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, log_p: &[f64]) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_p.iter().enumerate() {
        if lp.is_finite() {
            acc += lp.exp();
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Stochastic parameters of one tone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneDraw {
    pub nu: usize,
    pub eta: usize,
    pub b: f64,
    pub u: bool,
}

/// A drawn tone with its constrained heads and log-densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTone {
    pub draw: ToneDraw,
    pub heads: MappedHeads,
    /// `log pi(draw)` under the unlifted policy.
    pub log_pi: f64,
    /// `log pi^r(draw)` under the distribution actually sampled from.
    pub log_pi_lifted: f64,
}

/// `log sigmoid(z)` or `log sigmoid(-z)` without cancellation.
fn log_bernoulli(z: f64, u: bool) -> f64 {
    let s = if u { -z } else { z };
    -softplus(s)
}

/// Log-densities of a given draw.
pub fn evaluate_tone(
    out: &HeadOutputs,
    mask: &CategoricalMask,
    mapping: &HeadMapping,
    r: f64,
    draw: ToneDraw,
) -> Result<SampledTone> {
    if !mask.allows(draw.nu, draw.eta) || draw.nu >= out.len {
        return Err(Error::Domain(format!(
            "cell ({}, {}) is masked out",
            draw.nu, draw.eta
        )));
    }
    let idx = draw.nu * out.n_ins + draw.eta;
    let lp = masked_log_softmax(out, mask, 1.0)[idx];
    let lp_r = masked_log_softmax(out, mask, r)[idx];
    let heads = mapping.map(out, draw.nu, draw.eta);
    let z_u = out.get(Head::Sparsity, draw.nu, draw.eta);
    let lb = gamma_log_pdf(draw.b, heads.gamma_shape, heads.gamma_rate);
    Ok(SampledTone {
        draw,
        heads,
        log_pi: lp + log_bernoulli(z_u, draw.u) + lb,
        log_pi_lifted: lp_r + log_bernoulli(r * z_u, draw.u) + lb,
    })
}

/// Draws `(nu, eta)` and `u` from the `r`-lifted policy and `b` from the
/// unlifted gamma density.
pub fn sample_tone<R: Rng + ?Sized>(
    out: &HeadOutputs,
    mask: &CategoricalMask,
    mapping: &HeadMapping,
    r: f64,
    rng: &mut R,
) -> Result<SampledTone> {
    let lifted = masked_log_softmax(out, mask, r);
    if lifted.iter().all(|v| !v.is_finite()) {
        return Err(Error::Domain("no admissible (nu, eta) cell".into()));
    }
    let idx = sample_categorical(rng, &lifted);
    let (nu, eta) = (idx / out.n_ins, idx % out.n_ins);
    let heads = mapping.map(out, nu, eta);
    let b = sample_gamma(rng, heads.gamma_shape, heads.gamma_rate);
    let p_u = sigmoid(r * out.get(Head::Sparsity, nu, eta));
    let u = rng.random::<f64>() < p_u;
    evaluate_tone(out, mask, mapping, r, ToneDraw { nu, eta, b, u })
}

/// Most probable `(nu, eta)`, then the modes of `b` and `u` given it.
pub fn mode_tone(out: &HeadOutputs, mask: &CategoricalMask, mapping: &HeadMapping) -> Result<(ToneDraw, MappedHeads)> {
    let lp = masked_log_softmax(out, mask, 1.0);
    let idx = lp
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .ok_or_else(|| Error::Domain("no admissible (nu, eta) cell".into()))?
        .0;
    let (nu, eta) = (idx / out.n_ins, idx % out.n_ins);
    let heads = mapping.map(out, nu, eta);
    let draw = ToneDraw {
        nu,
        eta,
        b: gamma_mode(heads.gamma_shape, heads.gamma_rate),
        u: heads.p_present >= 0.5,
    };
    Ok((draw, heads))
}

/// Adds `scale * d log pi^r(draw) / d raw` into `d_out`.
pub fn add_log_density_grad(
    out: &HeadOutputs,
    mask: &CategoricalMask,
    mapping: &HeadMapping,
    r: f64,
    draw: ToneDraw,
    scale: f64,
    d_out: &mut HeadOutputs,
) {
    if scale == 0.0 {
        return;
    }
    let lq = masked_log_softmax(out, mask, r);
    let n_ins = out.n_ins;
    for (i, l) in lq.iter().enumerate() {
        if l.is_finite() {
            let (nu, eta) = (i / n_ins, i % n_ins);
            let hit = if nu == draw.nu && eta == draw.eta { 1.0 } else { 0.0 };
            *d_out.at_mut(Head::Logit, nu, eta) += scale * r * (hit - l.exp());
        }
    }
    let (nu, eta) = (draw.nu, draw.eta);
    let z_u = out.get(Head::Sparsity, nu, eta);
    let u = if draw.u { 1.0 } else { 0.0 };
    *d_out.at_mut(Head::Sparsity, nu, eta) += scale * r * (u - sigmoid(r * z_u));

    let raw_a = out.get(Head::GammaShape, nu, eta);
    let raw_b = out.get(Head::GammaRate, nu, eta);
    let (alpha, beta) = (mapping.gamma_param(raw_a), mapping.gamma_rate(raw_b));
    let d_alpha = beta.ln() - digamma(alpha) + draw.b.ln();
    let d_beta = alpha / beta - draw.b;
    *d_out.at_mut(Head::GammaShape, nu, eta) += scale * d_alpha * mapping.d_gamma_param(raw_a);
    *d_out.at_mut(Head::GammaRate, nu, eta) += scale * d_beta * mapping.d_gamma_rate(raw_b);
}

/// Mean of the sample losses.
pub fn baseline(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Per-sample multipliers `POLICY_SCALE * (L_i - C) / S` of the log-density
/// gradients.
pub fn policy_weights(losses: &[f64]) -> Vec<f64> {
    let c = baseline(losses);
    let s = losses.len().max(1) as f64;
    losses.iter().map(|l| POLICY_SCALE * (l - c) / s).collect()
}

/// `1/S sum_i [POLICY_SCALE grad log pi^{R_i} (L_i - C) + grad L_i]`.
pub fn grad_estimator(losses: &[f64], log_grads: &[Vec<f64>], loss_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let s = losses.len();
    if s == 0 || log_grads.len() != s || loss_grads.len() != s {
        return Err(Error::ShapeMismatch("one loss and two gradients per sample required".into()));
    }
    let n = loss_grads[0].len();
    if log_grads.iter().chain(loss_grads).any(|g| g.len() != n) {
        return Err(Error::ShapeMismatch("gradient lengths differ".into()));
    }
    let w = policy_weights(losses);
    let mut out = vec![0.0; n];
    for i in 0..s {
        for k in 0..n {
            out[k] += w[i] * log_grads[i][k] + loss_grads[i][k] / s as f64;
        }
    }
    Ok(out)
}

/// Importance weights `pi / pi^R` normalized to sum 1, from log-densities.
pub fn normalized_importance_weights(log_pi: &[f64], log_pi_lifted: &[f64]) -> Vec<f64> {
    let log_rho: Vec<f64> = log_pi.iter().zip(log_pi_lifted).map(|(a, b)| a - b).collect();
    let lse = log_sum_exp(log_rho.iter().copied());
    log_rho.iter().map(|l| (l - lse).exp()).collect()
}

/// `sum_i rho_i g_i / sum_i rho_i`.
pub fn dict_estimator(rhos: &[f64], grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let total: f64 = rhos.iter().sum();
    if !(total > 0.0) || rhos.len() != grads.len() || grads.is_empty() {
        return Err(Error::Domain("importance weights must have a positive sum".into()));
    }
    let n = grads[0].len();
    let mut out = vec![0.0; n];
    for (rho, g) in rhos.iter().zip(grads) {
        if g.len() != n {
            return Err(Error::ShapeMismatch("gradient lengths differ".into()));
        }
        for (o, v) in out.iter_mut().zip(g) {
            *o += rho / total * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lifted_categorical_oracle() {
        let lp = [0.9f64.ln(), 0.1f64.ln()];
        let q: Vec<f64> = lifted_log_probs(&lp, 0.1).iter().map(|v| v.exp()).collect();
        assert!((q[0] - 0.554_710_681_337_807).abs() < 1e-12, "{q:?}");
        assert!((q[1] - 0.445_289_318_662_193).abs() < 1e-12);
        let id: Vec<f64> = lifted_log_probs(&lp, 1.0).iter().map(|v| v.exp()).collect();
        assert!((id[0] - 0.9).abs() < 1e-15 && (id[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lifted_bernoulli_is_sigmoid_of_scaled_logit() {
        for &p in &[0.01f64, 0.3, 0.5, 0.97] {
            for &r in &LIFT_VALUES {
                let z = (p / (1.0 - p)).ln();
                assert!((lifted_bernoulli(p, r) - sigmoid(r * z)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn combinations_start_with_all_ones() {
        let combos = LiftScheme::default().combinations(2);
        assert_eq!(combos.len(), 9);
        assert_eq!(combos[0], vec![1.0, 1.0]);
        assert_eq!(combos.iter().filter(|c| c.iter().all(|r| *r == 1.0)).count(), 1);
        let mut sorted = combos.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
    }

    #[test]
    fn gamma_mode_maximizes_density() {
        for &(a, b) in &[(1.5, 0.25), (3.0, 1.0), (3.0, 0.5), (1.0, 2.0)] {
            let m = gamma_mode(a, b);
            let f = |x: f64| gamma_log_pdf(x, a, b);
            for dx in [1e-3, 1e-2, 0.1] {
                assert!(f(m + dx) <= f(m) + 1e-12);
                if m - dx > 0.0 {
                    assert!(f(m - dx) <= f(m) + 1e-12);
                }
            }
        }
        assert_eq!(gamma_mode(0.5, 1.0), 0.0);
    }

    #[test]
    fn tiny_shape_samples_stay_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let b = sample_gamma(&mut rng, 1e-12, 1.0);
            assert!(b > 0.0 && b.is_finite());
            assert!(gamma_log_pdf(b, 1e-12, 1.0).is_finite());
        }
    }

    #[test]
    fn estimator_with_equal_losses_is_mean_backprop() {
        let losses = [2.0; 4];
        let log_grads = vec![vec![1.0, -3.0]; 4];
        let loss_grads: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0]).collect();
        let g = grad_estimator(&losses, &log_grads, &loss_grads).unwrap();
        assert_eq!(g, vec![1.5, 1.0]);
        let single = grad_estimator(&[5.0], &[vec![7.0]], &[vec![0.0]]).unwrap();
        assert_eq!(single, vec![0.0]);
    }

    #[test]
    fn dict_estimator_limits() {
        let grads = vec![vec![1.0, 2.0], vec![3.0, -2.0]];
        assert_eq!(dict_estimator(&[1.0, 1.0], &grads).unwrap(), vec![2.0, 0.0]);
        let g = dict_estimator(&[1.0, 1e-300], &grads).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-12);
        assert!(dict_estimator(&[0.0, 0.0], &grads).is_err());
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let w = normalized_importance_weights(&[-1.0, -800.0, -2.0], &[-1.0, -2.0, -700.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn log_density_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n_ins, len) = (2, 6);
        let out = HeadOutputs {
            n_ins,
            len,
            data: (0..9 * n_ins * len).map(|_| rng.random_range(-1.5..1.5)).collect(),
        };
        let mask = CategoricalMask {
            nu_min: 1,
            nu_max: 4,
            assigned: vec![false, false],
        };
        let mapping = HeadMapping::for_window(7.46);
        for &r in &LIFT_VALUES {
            for &u in &[true, false] {
                let draw = ToneDraw { nu: 3, eta: 1, b: 0.37, u };
                let mut d = out.zeros_like();
                add_log_density_grad(&out, &mask, &mapping, r, draw, 1.0, &mut d);
                let f = |o: &HeadOutputs| evaluate_tone(o, &mask, &mapping, r, draw).unwrap().log_pi_lifted;
                let h = 1e-6;
                for i in 0..out.data.len() {
                    let mut p = out.clone();
                    p.data[i] += h;
                    let mut m = out.clone();
                    m.data[i] -= h;
                    let fd = (f(&p) - f(&m)) / (2.0 * h);
                    assert!((fd - d.data[i]).abs() < 1e-6 * fd.abs().max(1.0), "r={r} u={u} i={i}: {} vs {fd}", d.data[i]);
                }
            }
        }
    }
}
