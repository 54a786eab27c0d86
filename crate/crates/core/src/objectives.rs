//! Lifted spectral distances and the composite training loss.
//!
//! Gradients are returned in the complex convention `dL/dRe + i dL/dIm`, so a
//! perturbation `dy` changes the loss by `Re(conj(g) * dy)`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tonemodel::{Dictionary, FramePrediction};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Lifting exponent in `(0, 1]`.
    pub q: f64,
    /// Lifting offset, relative to unit-max normalized spectra.
    pub delta: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    /// Discount per discarded tone in the sparse term.
    pub lambda: f64,
    /// Stabilizer in the denominators of the phase-aware distance.
    pub rad_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            delta: 1e-4,
            mu1: 10.0,
            mu2: 10.0,
            mu3: 1.0,
            lambda: 0.9,
            rad_eps: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidConfig(format!("q must lie in (0, 1], got {}", self.q)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig("delta must be positive".into()));
        }
        if self.mu1 < 0.0 || self.mu2 < 0.0 || self.mu3 < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::InvalidConfig("lambda must lie in (0, 1]".into()));
        }
        if !(self.rad_eps > 0.0) {
            return Err(Error::InvalidConfig("rad_eps must be positive".into()));
        }
        Ok(())
    }
}

fn check_len(a: &[Complex64], b: &[Complex64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

#[inline]
fn lift_abs(z: Complex64, cfg: &LossConfig) -> f64 {
    (z.norm() + cfg.delta).powf(cfg.q)
}

/// `d/dz (|z| + delta)^q` in the complex convention; zero at `z = 0`.
#[inline]
fn lift_abs_grad(z: Complex64, cfg: &LossConfig) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        return ZERO;
    }
    z * (cfg.q * (r + cfg.delta).powf(cfg.q - 1.0) / r)
}

/// `(|z| + delta)^q * z / (|z| + eps)`.
#[inline]
fn lift_rad(z: Complex64, cfg: &LossConfig) -> Complex64 {
    let r = z.norm();
    z * ((r + cfg.delta).powf(cfg.q) / (r + cfg.rad_eps))
}

/// Transposed Jacobian of `lift_rad` applied to `e`.
#[inline]
fn lift_rad_vjp(z: Complex64, e: Complex64, cfg: &LossConfig) -> Complex64 {
    let r = z.norm();
    let lifted = (r + cfg.delta).powf(cfg.q);
    let g = lifted / (r + cfg.rad_eps);
    if r == 0.0 {
        return e * g;
    }
    let dg = cfg.q * (r + cfg.delta).powf(cfg.q - 1.0) / (r + cfg.rad_eps) - lifted / (r + cfg.rad_eps).powi(2);
    let proj = (z.conj() * e).re;
    e * g + z * (dg * proj / r)
}

/// `1/2 sum_l ((|Y|+delta)^q - (|y|+delta)^q)^2`.
pub fn dist_abs(target: &[Complex64], model: &[Complex64], cfg: &LossConfig) -> Result<f64> {
    check_len(target, model)?;
    Ok(0.5
        * target
            .iter()
            .zip(model)
            .map(|(&t, &m)| (lift_abs(t, cfg) - lift_abs(m, cfg)).powi(2))
            .sum::<f64>())
}

/// Value and gradient of [`dist_abs`] with respect to `model`.
pub fn dist_abs_grad(target: &[Complex64], model: &[Complex64], cfg: &LossConfig) -> Result<(f64, Vec<Complex64>)> {
    check_len(target, model)?;
    let mut value = 0.0;
    let grad = target
        .iter()
        .zip(model)
        .map(|(&t, &m)| {
            let diff = lift_abs(t, cfg) - lift_abs(m, cfg);
            value += 0.5 * diff * diff;
            -lift_abs_grad(m, cfg) * diff
        })
        .collect();
    Ok((value, grad))
}

/// Phase-aware distance `1/2 sum_l |lift(Y) - lift(y)|^2` with the radial
/// lift `(|z|+delta)^q * z/|z|`.
pub fn dist_rad(a: &[Complex64], b: &[Complex64], cfg: &LossConfig) -> Result<f64> {
    check_len(a, b)?;
    Ok(0.5
        * a.iter()
            .zip(b)
            .map(|(&x, &y)| (lift_rad(x, cfg) - lift_rad(y, cfg)).norm_sqr())
            .sum::<f64>())
}

/// Value of [`dist_rad`] and its gradients with respect to both arguments.
pub fn dist_rad_grad(
    a: &[Complex64],
    b: &[Complex64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Complex64>, Vec<Complex64>)> {
    check_len(a, b)?;
    let mut value = 0.0;
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let e = lift_rad(x, cfg) - lift_rad(y, cfg);
        value += 0.5 * e.norm_sqr();
        ga.push(lift_rad_vjp(x, e, cfg));
        gb.push(-lift_rad_vjp(y, e, cfg));
    }
    Ok((value, ga, gb))
}

/// The three loss components before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// `d_abs(Y, y_spr)`.
    pub sparse_abs: f64,
    /// `d_rad(Y, y_dir)`.
    pub direct_rad: f64,
    /// `1/m sum_j d_rad(y_dir_j, y_j)`.
    pub regularizer: f64,
    /// Number of tones with `u = 0`.
    pub dropped: usize,
}

impl LossParts {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        cfg.mu1 * self.sparse_abs * cfg.lambda.powi(self.dropped as i32)
            + cfg.mu2 * self.direct_rad
            + cfg.mu3 * self.regularizer
    }
}

/// Gradients of the total loss with respect to every per-tone spectrum.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub parts: LossParts,
    pub value: f64,
    pub y_dict: Vec<Vec<Complex64>>,
    pub y_dir: Vec<Vec<Complex64>>,
}

/// `mu1 d_abs(Y, y_spr) lambda^(#dropped) + mu2 d_rad(Y, y_dir) + mu3/m sum_j d_rad(y_dir_j, y_j)`.
pub fn total_loss(frame: &FramePrediction, target: &[Complex64], cfg: &LossConfig) -> Result<f64> {
    Ok(loss_parts(frame, target, cfg)?.total(cfg))
}

pub fn loss_parts(frame: &FramePrediction, target: &[Complex64], cfg: &LossConfig) -> Result<LossParts> {
    let agg = frame.aggregate();
    let m = frame.tones.len().max(1) as f64;
    let mut reg = 0.0;
    for (yd, yr) in frame.y_dir.iter().zip(&frame.y_dict) {
        reg += dist_rad(yd, yr, cfg)?;
    }
    Ok(LossParts {
        sparse_abs: dist_abs(target, &agg.y_spr, cfg)?,
        direct_rad: dist_rad(target, &agg.y_dir, cfg)?,
        regularizer: reg / m,
        dropped: frame.tones.iter().filter(|t| !t.u).count(),
    })
}

pub fn total_loss_grad(frame: &FramePrediction, target: &[Complex64], cfg: &LossConfig) -> Result<LossGrads> {
    let agg = frame.aggregate();
    let m = frame.tones.len();
    let discount = cfg.lambda.powi(frame.tones.iter().filter(|t| !t.u).count() as i32);
    let (sparse_abs, g_spr) = dist_abs_grad(target, &agg.y_spr, cfg)?;
    let (direct_rad, _, g_dir) = dist_rad_grad(target, &agg.y_dir, cfg)?;
    let w_reg = cfg.mu3 / m.max(1) as f64;
    let mut regularizer = 0.0;
    let mut y_dict = Vec::with_capacity(m);
    let mut y_dir = Vec::with_capacity(m);
    for (j, tone) in frame.tones.iter().enumerate() {
        let (r, g_a, g_b) = dist_rad_grad(&frame.y_dir[j], &frame.y_dict[j], cfg)?;
        regularizer += r;
        let spr_w = if tone.u { cfg.mu1 * discount } else { 0.0 };
        y_dict.push(g_spr.iter().zip(&g_b).map(|(s, b)| s * spr_w + b * w_reg).collect());
        y_dir.push(g_dir.iter().zip(&g_a).map(|(d, a)| d * cfg.mu2 + a * w_reg).collect());
    }
    let parts = LossParts {
        sparse_abs,
        direct_rad,
        regularizer: regularizer / m.max(1) as f64,
        dropped: frame.tones.iter().filter(|t| !t.u).count(),
    };
    Ok(LossGrads {
        value: parts.total(cfg),
        parts,
        y_dict,
        y_dir,
    })
}

/// `1/N_ins sum_eta (log max_h D[h, eta])^2`, pinning each column maximum to 1.
pub fn dict_bound_loss(dict: &Dictionary) -> Result<f64> {
    Ok(dict_bound_loss_grad(dict)?.0)
}

/// Value of [`dict_bound_loss`] and its gradient (row-major like the entries).
pub fn dict_bound_loss_grad(dict: &Dictionary) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; dict.entries.len()];
    let mut value = 0.0;
    let n = dict.n_ins as f64;
    for eta in 0..dict.n_ins {
        let (h_max, max) = (0..dict.n_har)
            .map(|h| (h, dict.get(h, eta)))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(max > 0.0) {
            return Err(Error::DegenerateColumn(eta));
        }
        let lg = max.ln();
        value += lg * lg / n;
        grad[h_max * dict.n_ins + eta] = 2.0 * lg / (max * n);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tonemodel::ToneState;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn abs_distance_scalar_case() {
        let cfg = LossConfig::default();
        let d = dist_abs(&[c(1.0, 0.0), ZERO], &[ZERO, ZERO], &cfg).unwrap();
        let expected = 0.5 * ((1.0f64 + 1e-4).sqrt() - 1e-4f64.sqrt()).powi(2);
        assert_relative_eq!(d, expected, max_relative = 1e-14);
        assert_relative_eq!(d, 0.4900995, epsilon = 1e-7);
    }

    #[test]
    fn abs_distance_ignores_phase() {
        let cfg = LossConfig::default();
        let y = vec![c(0.3, -0.2), c(1.0, 0.5), c(0.0, 0.01)];
        let rot: Vec<Complex64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| v * Complex64::from_polar(1.0, 0.7 * i as f64 + 0.1))
            .collect();
        assert_eq!(dist_abs(&y, &y, &cfg).unwrap(), 0.0);
        assert!(dist_abs(&y, &rot, &cfg).unwrap() < 1e-28);
    }

    #[test]
    fn rad_distance_opposite_phase() {
        let cfg = LossConfig {
            delta: 1e-12,
            ..LossConfig::default()
        };
        let d = dist_rad(&[c(1.0, 0.0)], &[c(-1.0, 0.0)], &cfg).unwrap();
        assert_relative_eq!(d, 2.0, max_relative = 1e-9);
        assert_eq!(dist_rad(&[c(0.2, 0.3)], &[c(0.2, 0.3)], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let cfg = LossConfig::default();
        assert!(matches!(
            dist_abs(&[ZERO], &[ZERO, ZERO], &cfg),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(dist_rad(&[ZERO; 3], &[ZERO], &cfg).is_err());
    }

    #[test]
    fn q_one_limits() {
        let cfg = LossConfig {
            q: 1.0,
            delta: 1e-13,
            ..LossConfig::default()
        };
        let a = vec![c(0.3, 0.4), c(-1.0, 0.2)];
        let b = vec![c(0.1, -0.4), c(0.5, 0.5)];
        let l2: f64 = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>();
        let mag: f64 = 0.5 * a.iter().zip(&b).map(|(x, y)| (x.norm() - y.norm()).powi(2)).sum::<f64>();
        assert_relative_eq!(dist_rad(&a, &b, &cfg).unwrap(), l2, max_relative = 1e-9);
        assert_relative_eq!(dist_abs(&a, &b, &cfg).unwrap(), mag, max_relative = 1e-9);
    }

    fn frame_with(u: &[bool], n: usize) -> FramePrediction {
        let tones = u
            .iter()
            .map(|&u| ToneState {
                nu: 10,
                nu_tilde: 0.0,
                eta: 0,
                b: 0.0,
                a: 1.0,
                sigma: 1.0,
                u,
                coeffs: vec![],
                phases: vec![],
            })
            .collect();
        let spec: Vec<Complex64> = (0..n).map(|l| c(0.1 * l as f64, 0.05)).collect();
        FramePrediction {
            tones,
            y_dict: vec![spec.clone(); u.len()],
            y_dir: vec![spec; u.len()],
        }
    }

    #[test]
    fn sparse_term_discount() {
        let cfg = LossConfig::default();
        let target: Vec<Complex64> = (0..8).map(|l| c(0.3, 0.1 * l as f64)).collect();
        let all = loss_parts(&frame_with(&[true, true], 8), &target, &cfg).unwrap();
        let one = loss_parts(&frame_with(&[true, false], 8), &target, &cfg).unwrap();
        let none = loss_parts(&frame_with(&[false, false], 8), &target, &cfg).unwrap();
        assert_eq!(one.dropped, 1);
        let sparse_one = one.total(&cfg) - cfg.mu2 * one.direct_rad - cfg.mu3 * one.regularizer;
        assert_relative_eq!(sparse_one, 10.0 * one.sparse_abs * 0.9, max_relative = 1e-12);
        let sparse_none = none.total(&cfg) - cfg.mu2 * none.direct_rad - cfg.mu3 * none.regularizer;
        assert_relative_eq!(sparse_none, 10.0 * none.sparse_abs * 0.81, max_relative = 1e-12);
        assert!(all.sparse_abs != one.sparse_abs);
    }

    #[test]
    fn perfect_fit_is_near_zero() {
        let cfg = LossConfig::default();
        let f = frame_with(&[true], 16);
        let target = f.y_dict[0].clone();
        assert!(total_loss(&f, &target, &cfg).unwrap() < 1e-20);
    }

    #[test]
    fn dict_bound_values_and_errors() {
        let d = Dictionary::initial(6, 3);
        assert_eq!(dict_bound_loss(&d).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let d = Dictionary::new(2, 2, vec![e, 1.0, 0.5, 0.2]).unwrap();
        assert_relative_eq!(dict_bound_loss(&d).unwrap(), 0.5, max_relative = 1e-15);
        let d = Dictionary::new(2, 1, vec![0.0, -1.0]).unwrap();
        assert!(matches!(dict_bound_loss(&d), Err(Error::DegenerateColumn(0))));
    }

    #[test]
    fn dict_bound_gradient_pulls_towards_one() {
        for (max, sign) in [(1.5, 1.0), (0.6, -1.0)] {
            let mut d = Dictionary::new(2, 1, vec![max, 0.3]).unwrap();
            let (_, g) = dict_bound_loss_grad(&d).unwrap();
            let h = 1e-6;
            d.entries[0] = max + h;
            let up = dict_bound_loss(&d).unwrap();
            d.entries[0] = max - h;
            let down = dict_bound_loss(&d).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert_relative_eq!(g[0], fd, max_relative = 1e-6);
            assert_eq!(g[0].signum(), sign);
            assert_eq!(g[1], 0.0);
        }
    }

    fn finite_difference_check(grad: &[Complex64], f: impl Fn(usize, Complex64) -> f64) {
        let h = 1e-7;
        for (l, g) in grad.iter().enumerate() {
            let re = (f(l, c(h, 0.0)) - f(l, c(-h, 0.0))) / (2.0 * h);
            let im = (f(l, c(0.0, h)) - f(l, c(0.0, -h))) / (2.0 * h);
            let scale = g.norm().max(1e-3);
            assert!((g.re - re).abs() / scale < 1e-5, "re {l}: {} vs {re}", g.re);
            assert!((g.im - im).abs() / scale < 1e-5, "im {l}: {} vs {im}", g.im);
        }
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let a = vec![c(0.3, 0.4), c(-1.0, 0.2), c(0.01, -0.02), c(0.5, 0.0)];
        let b = vec![c(0.1, -0.4), c(0.5, 0.5), c(-0.03, 0.0), c(0.2, 0.7)];
        let (_, g) = dist_abs_grad(&a, &b, &cfg).unwrap();
        finite_difference_check(&g, |l, d| {
            let mut bb = b.clone();
            bb[l] += d;
            dist_abs(&a, &bb, &cfg).unwrap()
        });
        let (_, ga, gb) = dist_rad_grad(&a, &b, &cfg).unwrap();
        finite_difference_check(&ga, |l, d| {
            let mut aa = a.clone();
            aa[l] += d;
            dist_rad(&aa, &b, &cfg).unwrap()
        });
        finite_difference_check(&gb, |l, d| {
            let mut bb = b.clone();
            bb[l] += d;
            dist_rad(&a, &bb, &cfg).unwrap()
        });
    }

    fn cvec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
        prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64).prop_map(|(r, i)| c(r, i)), n)
    }

    proptest! {
        #[test]
        fn distances_are_symmetric((a, b) in (cvec(12), cvec(12))) {
            let cfg = LossConfig::default();
            let ab = dist_abs(&a, &b, &cfg).unwrap();
            let ba = dist_abs(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            let ab = dist_rad(&a, &b, &cfg).unwrap();
            let ba = dist_rad(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }

        #[test]
        fn radial_distance_dominates_magnitude_distance((a, b) in (cvec(12), cvec(12))) {
            let cfg = LossConfig::default();
            let abs = dist_abs(&a, &b, &cfg).unwrap();
            let rad = dist_rad(&a, &b, &cfg).unwrap();
            prop_assert!(rad >= abs - 1e-9);
            prop_assert!(abs >= 0.0);
        }
    }
}
