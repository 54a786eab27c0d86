//! Per-harmonic complex coefficients from the network's artificial spectrum.
//!
//! The coefficients solve the ridge problem
//! `min_c 1/2 |G c - v|^2 + reg/2 |c|^2` where the columns of `G` are the
//! tone's Gaussian peaks. `G` is real, so real and imaginary parts share one
//! factorization of `G^T G + reg I`.

use num_complex::Complex64;

use crate::linalg::{cholesky, cholesky_solve};
use crate::tonemodel::{PeakParamGrads, Peaks};

/// Default ridge weight relative to the largest squared column norm.
pub const DEFAULT_RELATIVE_REG: f64 = 1e-6;

/// Least-squares basis of one tone.
#[derive(Debug, Clone)]
pub struct PeakBasis {
    pub peaks: Peaks,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    Absolute(f64),
    /// Multiple of the largest squared column norm of `G`.
    Relative(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Relative(DEFAULT_RELATIVE_REG)
    }
}

impl PeakBasis {
    pub fn new(peaks: Peaks) -> Self {
        Self { peaks }
    }

    fn column_norms_sq(&self) -> Vec<f64> {
        (0..self.peaks.n_har())
            .map(|h| self.peaks.column(h).1.iter().map(|g| g * g).sum())
            .collect()
    }

    /// Absolute ridge weight and the column whose norm sets it (for the
    /// relative variant).
    pub fn resolve(&self, reg: Regularization) -> (f64, Option<usize>) {
        match reg {
            Regularization::Absolute(r) => (r, None),
            Regularization::Relative(rel) => {
                let norms = self.column_norms_sq();
                let (h, m) = norms
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                if m > 0.0 {
                    (rel * m, Some(h))
                } else {
                    // every harmonic above Nyquist; any positive weight gives c = 0
                    (rel, None)
                }
            }
        }
    }

    /// Factor of `G^T G + reg I`.
    fn normal_factor(&self, reg: f64) -> Vec<f64> {
        let n = self.peaks.n_har();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let (lo_i, ci) = self.peaks.column(i);
            for j in 0..=i {
                let (lo_j, cj) = self.peaks.column(j);
                let lo = lo_i.max(lo_j);
                let hi = (lo_i + ci.len()).min(lo_j + cj.len());
                let mut s = 0.0;
                for l in lo..hi.max(lo) {
                    s += ci[l - lo_i] * cj[l - lo_j];
                }
                a[i * n + j] = s;
                a[j * n + i] = s;
            }
            a[i * n + i] += reg;
        }
        cholesky(&a, n).expect("ridge-regularized normal matrix is positive definite")
    }

    fn solve_factored(&self, factor: &[f64], rhs: &[Complex64]) -> Vec<Complex64> {
        let n = self.peaks.n_har();
        let mut re: Vec<f64> = rhs.iter().map(|z| z.re).collect();
        let mut im: Vec<f64> = rhs.iter().map(|z| z.im).collect();
        cholesky_solve(factor, n, &mut re);
        cholesky_solve(factor, n, &mut im);
        re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect()
    }
}

/// Ridge solution `c = (G^T G + reg I)^-1 G^T v`.
pub fn solve_coeffs(basis: &PeakBasis, v: &[Complex64], reg: f64) -> Vec<Complex64> {
    assert!(reg > 0.0, "ridge weight must be positive");
    let factor = basis.normal_factor(reg);
    basis.solve_factored(&factor, &basis.peaks.project(v))
}

/// Phase angles in `[-pi, pi)`; a zero coefficient has phase 0.
pub fn extract_phases(c: &[Complex64]) -> Vec<f64> {
    c.iter()
        .map(|z| {
            if z.re == 0.0 && z.im == 0.0 {
                return 0.0;
            }
            let p = z.im.atan2(z.re);
            if p >= std::f64::consts::PI {
                -std::f64::consts::PI
            } else {
                p
            }
        })
        .collect()
}

/// `d phi / d c` applied to an upstream phase gradient, in the complex
/// convention.
pub fn phase_backward(c: &[Complex64], d_phase: &[f64]) -> Vec<Complex64> {
    c.iter()
        .zip(d_phase)
        .map(|(z, g)| {
            let n2 = z.norm_sqr();
            if n2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(-z.im, z.re) * (g / n2)
            }
        })
        .collect()
}

/// Gradients of a scalar through the ridge solution.
#[derive(Debug, Clone)]
pub struct SolveGrads {
    pub v: Vec<Complex64>,
    pub params: PeakParamGrads,
}

/// Solution together with everything needed for the backward pass.
#[derive(Debug, Clone)]
pub struct Solved {
    pub coeffs: Vec<Complex64>,
    reg: f64,
    reg_column: Option<usize>,
    factor: Vec<f64>,
}

pub fn solve(basis: &PeakBasis, v: &[Complex64], reg: Regularization) -> Solved {
    let (r, reg_column) = basis.resolve(reg);
    let factor = basis.normal_factor(r);
    let coeffs = basis.solve_factored(&factor, &basis.peaks.project(v));
    Solved {
        coeffs,
        reg: r,
        reg_column,
        factor,
    }
}

/// Exact gradients of `L(c(v, G))` with respect to `v` and to the peak
/// parameters inside `G`, given `upstream = dL/dc`.
pub fn solve_coeffs_grad(
    basis: &PeakBasis,
    v: &[Complex64],
    reg: Regularization,
    upstream: &[Complex64],
) -> SolveGrads {
    let solved = solve(basis, v, reg);
    solve_backward(basis, v, &solved, upstream)
}

pub fn solve_backward(basis: &PeakBasis, v: &[Complex64], solved: &Solved, upstream: &[Complex64]) -> SolveGrads {
    let peaks = &basis.peaks;
    let c = &solved.coeffs;
    // lambda = A^-1 dL/dc (A symmetric)
    let lambda = basis.solve_factored(&solved.factor, upstream);
    let grad_v = peaks.synth(&lambda);
    let fit = peaks.synth(c);
    let d_reg = match solved.reg_column {
        Some(_) => -lambda.iter().zip(c).map(|(l, x)| (l.conj() * x).re).sum::<f64>(),
        None => 0.0,
    };
    let rel = if solved.reg_column.is_some() {
        solved.reg / basis.column_norms_sq()[solved.reg_column.unwrap()]
    } else {
        0.0
    };
    // dL/dG[l,h] = Re(conj(v - G c)_l lambda_h) - Re(conj(G lambda)_l c_h) (+ ridge path)
    let params = peaks.param_grads(|h, l| {
        let mut g = ((v[l] - fit[l]).conj() * lambda[h]).re - (grad_v[l].conj() * c[h]).re;
        if solved.reg_column == Some(h) {
            let (lo, vals) = peaks.column(h);
            g += d_reg * rel * 2.0 * vals[l - lo];
        }
        g
    });
    SolveGrads { v: grad_v, params }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gabor::GaborConfig;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(f1: f64, b: f64, sigma: f64, n_har: usize) -> PeakBasis {
        PeakBasis::new(Peaks::new(f1, b, sigma, n_har, &GaborConfig::default()).unwrap())
    }

    fn rand_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let b = basis(200.0, 0.0, 7.46, 6);
        let c = solve_coeffs(&b, &vec![Complex64::new(0.0, 0.0); 6144], 1e-3);
        assert!(c.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn recovers_known_coefficients() {
        let b = basis(310.0, 1e-4, 7.46, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = rand_c(&mut rng, 8);
        let v = b.peaks.synth(&truth);
        let c = solve_coeffs(&b, &v, 1e-8);
        for (x, y) in c.iter().zip(&truth) {
            assert!((x - y).norm() < 1e-6);
        }
    }

    #[test]
    fn single_harmonic_phase() {
        let b = basis(500.0, 0.0, 7.46, 1);
        let peak = Complex64::from_polar(0.8, std::f64::consts::FRAC_PI_4);
        let v = b.peaks.synth(&[peak]);
        let c = solve_coeffs(&b, &v, 1e-6);
        assert!((c[0].arg() - std::f64::consts::FRAC_PI_4).abs() < 1e-9);
    }

    #[test]
    fn phases_are_half_open() {
        let p = extract_phases(&[
            Complex64::new(1.0, 0.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 2.0),
            Complex64::new(0.0, 0.0),
        ]);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], -std::f64::consts::PI);
        assert_relative_eq!(p[2], std::f64::consts::FRAC_PI_2);
        assert_eq!(p[3], 0.0);
    }

    #[test]
    fn linear_in_rhs_and_shrinks_with_ridge() {
        let b = basis(180.0, 0.0, 6.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v1 = rand_c(&mut rng, 6144);
        let v2 = rand_c(&mut rng, 6144);
        let sum: Vec<Complex64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let c1 = solve_coeffs(&b, &v1, 1e-4);
        let c2 = solve_coeffs(&b, &v2, 1e-4);
        let cs = solve_coeffs(&b, &sum, 1e-4);
        for i in 0..5 {
            assert!((cs[i] - c1[i] - c2[i]).norm() < 1e-12);
        }
        let mut prev = f64::INFINITY;
        for reg in [1e-4, 1e-2, 1.0, 1e2, 1e4] {
            let n: f64 = solve_coeffs(&b, &v1, reg).iter().map(|z| z.norm_sqr()).sum();
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn aligned_target_gives_ideal_phases() {
        let b = basis(400.0, 0.0, 7.46, 4);
        let truth: Vec<Complex64> = [0.3, -2.0, 1.1, 2.9]
            .iter()
            .zip([1.0, 0.5, 0.25, 0.125])
            .map(|(&p, a)| Complex64::from_polar(a, p))
            .collect();
        let y = b.peaks.synth(&truth);
        let phases = extract_phases(&solve_coeffs(&b, &y, 1e-6 * 3.4));
        for (p, t) in phases.iter().zip(&truth) {
            assert!((p - t.arg()).abs() < 1e-6);
        }
    }

    // scalar objective: Re(sum w_h conj-weighted c_h)
    fn objective(c: &[Complex64], w: &[Complex64]) -> f64 {
        c.iter().zip(w).map(|(x, y)| (y.conj() * x).re).sum()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let b = basis(250.0, 1e-3, 5.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_c(&mut rng, 6144);
        let g = solve_coeffs_grad(&b, &v, Regularization::default(), &vec![Complex64::new(0.0, 0.0); 6]);
        assert!(g.v.iter().all(|z| z.norm() == 0.0));
        assert_eq!(g.params, PeakParamGrads::default());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (f1, bb, sigma) = (230.0, 2e-3, 9.0);
        let n_har = 5;
        let w = rand_c(&mut rng, n_har);
        let base = basis(f1, bb, sigma, n_har);
        // make v resemble a spectrum near the peaks so every column matters
        let mut v = base.peaks.synth(&rand_c(&mut rng, n_har));
        for z in v.iter_mut() {
            *z += Complex64::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
        }
        for reg in [Regularization::Relative(1e-3), Regularization::Absolute(0.05)] {
            let g = solve_coeffs_grad(&base, &v, reg, &w);
            let eval = |f1: f64, b: f64, s: f64, v: &[Complex64]| {
                let basis = PeakBasis::new(Peaks::new(f1, b, s, n_har, &GaborConfig::default()).unwrap());
                objective(&solve(&basis, v, reg).coeffs, &w)
            };
            let h = 1e-5;
            let fd_f1 = (eval(f1 + h, bb, sigma, &v) - eval(f1 - h, bb, sigma, &v)) / (2.0 * h);
            let fd_s = (eval(f1, bb, sigma + h, &v) - eval(f1, bb, sigma - h, &v)) / (2.0 * h);
            let hb = 1e-8;
            let fd_b = (eval(f1, bb + hb, sigma, &v) - eval(f1, bb - hb, sigma, &v)) / (2.0 * hb);
            assert_relative_eq!(g.params.f1, fd_f1, max_relative = 1e-5);
            assert_relative_eq!(g.params.sigma, fd_s, max_relative = 1e-4);
            assert_relative_eq!(g.params.b, fd_b, max_relative = 1e-4);
            // a few entries of v, both components
            let (lo, col) = base.peaks.column(2);
            for l in [lo, lo + col.len() / 2, lo + col.len() - 3] {
                for d in [Complex64::new(1e-6, 0.0), Complex64::new(0.0, 1e-6)] {
                    let mut vp = v.clone();
                    vp[l] += d;
                    let mut vm = v.clone();
                    vm[l] -= d;
                    let fd = (eval(f1, bb, sigma, &vp) - eval(f1, bb, sigma, &vm)) / 2e-6;
                    let an = if d.re != 0.0 { g.v[l].re } else { g.v[l].im };
                    assert!((an - fd).abs() <= 1e-5 * an.abs().max(1e-3), "v[{l}] {an} vs {fd}");
                }
            }
        }
    }
}
