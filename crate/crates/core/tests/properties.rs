use num_complex::Complex64;
use proptest::prelude::*;
use unmix::gabor::{analyze, synthesize, GaborConfig, TimeSignal};
use unmix::metrics::{bss_eval, decompose};
use unmix::phasesolver::{extract_phases, solve_coeffs, PeakBasis};
use unmix::policy::{lifted_bernoulli, lifted_log_probs, LiftScheme};
use unmix::tonemodel::{harmonic_frequencies, Dictionary, Peaks};
use unmix::trainer::{adamax_dict_step, adamax_step, Moments, TrainConfig};

fn lattice() -> GaborConfig {
    GaborConfig::for_sample_rate(8000.0)
}

fn signal(samples: Vec<f64>) -> TimeSignal {
    TimeSignal::new(samples, 8000.0).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let n: f64 = b.iter().map(|y| y * y).sum();
    (d / n.max(1e-300)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn round_trip_holds_for_any_length(x in prop::collection::vec(-1.0f64..1.0, 1..3000)) {
        let back = synthesize(&analyze(&signal(x.clone()), &lattice()).unwrap()).unwrap();
        prop_assert_eq!(back.len(), x.len());
        prop_assert!(rel_err(&back.samples, &x) < 1e-10);
    }

    #[test]
    fn analysis_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 800),
        y in prop::collection::vec(-1.0f64..1.0, 800),
        a in -3.0f64..3.0,
    ) {
        let cfg = lattice();
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let (sx, sy, sz) = (
            analyze(&signal(x), &cfg).unwrap(),
            analyze(&signal(y), &cfg).unwrap(),
            analyze(&signal(z), &cfg).unwrap(),
        );
        let scale = sz.max_abs().max(1.0);
        for k in 0..sz.n_len {
            for ((p, q), r) in sx.frame(k).iter().zip(sy.frame(k)).zip(sz.frame(k)) {
                prop_assert!((p * a + q - r).norm() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn partials_are_increasing_and_stretched(f1 in 20.0f64..2000.0, b in 0.0f64..0.05, n in 1usize..32) {
        let f = harmonic_frequencies(f1, b, n).unwrap();
        prop_assert!(f.windows(2).all(|w| w[1] > w[0]));
        for (h, fh) in f.iter().enumerate() {
            prop_assert!(*fh >= f1 * (h + 1) as f64 * (1.0 - 1e-15));
        }
    }

    #[test]
    fn lifted_categorical_is_a_distribution_preserving_order(
        p in prop::collection::vec(1e-6f64..1.0, 2..40),
        r in 0.005f64..1.0,
    ) {
        let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let q = lifted_log_probs(&log_p, r);
        let total: f64 = q.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] > p[j] {
                    prop_assert!(q[i] >= q[j]);
                }
            }
        }
        // Flattening never moves the most likely entry further from uniform.
        let (pmax, qmax) = (p.iter().cloned().fold(0.0, f64::max) / p.iter().sum::<f64>(), q.iter().cloned().fold(f64::MIN, f64::max).exp());
        prop_assert!(qmax <= pmax + 1e-12);
    }

    #[test]
    fn lifted_presence_is_symmetric(p in 1e-9f64..(1.0 - 1e-9), r in 0.005f64..1.0) {
        let (q, q_neg) = (lifted_bernoulli(p, r), lifted_bernoulli(1.0 - p, r));
        prop_assert!((q + q_neg - 1.0).abs() < 1e-14);
        prop_assert!((q - 0.5).abs() <= (p - 0.5).abs() + 1e-14);
    }

    #[test]
    fn lift_combinations_enumerate_every_vector_once(m in 1usize..5) {
        let scheme = LiftScheme::default();
        let combos = scheme.combinations(m);
        prop_assert_eq!(combos.len(), scheme.r_values.len().pow(m as u32));
        prop_assert!(combos[0].iter().all(|&r| r == 1.0));
        prop_assert_eq!(combos.iter().filter(|c| c.iter().all(|&r| r == 1.0)).count(), 1);
        let mut sorted: Vec<Vec<u64>> = combos.iter().map(|c| c.iter().map(|r| r.to_bits()).collect()).collect();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), combos.len());
    }

    #[test]
    fn ridge_solution_satisfies_the_normal_equations(
        f1 in 80.0f64..400.0,
        sigma in 4.0f64..20.0,
        v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 512),
        reg in 1e-4f64..1.0,
    ) {
        let cfg = GaborConfig { beta_hz: 4000.0 / 1024.0, n_spc: 512, ..GaborConfig::for_sample_rate(4000.0) };
        let v: Vec<Complex64> = v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect();
        let basis = PeakBasis::new(Peaks::new(f1, 1e-4, sigma, 6, &cfg).unwrap());
        let c = solve_coeffs(&basis, &v, reg);
        let fit = basis.peaks.synth(&c);
        let resid: Vec<Complex64> = fit.iter().zip(&v).map(|(a, b)| a - b).collect();
        let g = basis.peaks.project(&resid);
        let scale = basis.peaks.project(&v).iter().map(|z| z.norm()).fold(1.0, f64::max);
        for (gh, ch) in g.iter().zip(&c) {
            prop_assert!((gh + ch * reg).norm() <= 1e-9 * scale);
        }
    }

    #[test]
    fn phases_are_half_open_and_recover_direction(c in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
        let c: Vec<Complex64> = c.into_iter().map(|(a, b)| Complex64::new(a, b)).collect();
        for (phi, z) in extract_phases(&c).into_iter().zip(&c) {
            prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&phi));
            prop_assert!((Complex64::from_polar(z.norm(), phi) - z).norm() <= 1e-12 * z.norm().max(1.0));
        }
    }

    #[test]
    fn adamax_moves_each_parameter_by_at_most_the_corrected_rate(
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..12),
    ) {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0; 6];
        let mut st = Moments::zeros(6, 6);
        for (t, g) in grads.iter().enumerate() {
            let before = p.clone();
            let inf_before = st.inf.clone();
            adamax_step(&mut p, g, &mut st, 1e-3, t as u64 + 1, &cfg);
            for i in 0..6 {
                prop_assert!(st.inf[i] >= 0.0 && st.inf[i] >= cfg.beta2 * inf_before[i]);
                let bound = 1e-3 / (1.0 - cfg.beta1.powi(t as i32 + 1));
                prop_assert!((p[i] - before[i]).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn dictionary_columns_share_one_denominator(g in prop::collection::vec(-2.0f64..2.0, 12)) {
        let cfg = TrainConfig::default();
        let mut d = Dictionary::new(6, 2, vec![0.5; 12]).unwrap();
        let mut st = Moments::zeros(12, 2);
        adamax_dict_step(&mut d, &g, &mut st, 1e-2, 1, &cfg);
        for eta in 0..2 {
            let col_max = (0..6).map(|h| g[h * 2 + eta].abs()).fold(0.0, f64::max);
            prop_assert_eq!(st.inf[eta], col_max);
            for h in 0..6 {
                let expect = 0.5 - 1e-2 * g[h * 2 + eta] / (col_max + cfg.eps);
                prop_assert!((d.raw(h, eta) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn projection_is_non_negative_and_idempotent(e in prop::collection::vec(-1.0f64..1.0, 8)) {
        let mut d = Dictionary::new(4, 2, e.clone()).unwrap();
        d.project_nonnegative();
        prop_assert!(d.entries.iter().all(|&v| v >= 0.0));
        let once = d.entries.clone();
        d.project_nonnegative();
        prop_assert_eq!(once, d.entries.clone());
        for h in 0..4 {
            for eta in 0..2 {
                prop_assert_eq!(d.get(h, eta), e[h * 2 + eta].max(0.0));
            }
        }
    }

    #[test]
    fn decomposition_accounts_for_all_energy(
        s in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 64..400),
        mix in 0.0f64..1.0,
    ) {
        let r1: Vec<f64> = s.iter().map(|t| t.0).collect();
        let r2: Vec<f64> = s.iter().map(|t| t.1).collect();
        let est: Vec<f64> = s.iter().map(|t| t.0 + mix * t.1 + 0.1 * t.2).collect();
        let d = decompose(&[&est, &r2], &[&r1, &r2]).unwrap();
        let energy: f64 = est.iter().map(|v| v * v).sum();
        let total = d[0].target + d[0].interference + d[0].artifacts;
        prop_assert!((total - energy).abs() <= 1e-9 * energy);
    }

    #[test]
    fn metrics_ignore_estimate_gain(
        s in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 64..300),
        gain in 0.01f64..100.0,
    ) {
        let r: Vec<TimeSignal> = [0, 1]
            .iter()
            .map(|&k| signal(s.iter().map(|t| if k == 0 { t.0 } else { t.1 }).collect()))
            .collect();
        let e: Vec<f64> = s.iter().map(|t| t.0 + 0.3 * t.1 + 0.2 * t.2).collect();
        let est = |g: f64| vec![signal(e.iter().map(|v| g * v).collect()), r[1].clone()];
        let (m1, m2) = (bss_eval(&est(1.0), &r).unwrap(), bss_eval(&est(gain), &r).unwrap());
        prop_assert!((m1[0].sdr_db - m2[0].sdr_db).abs() < 1e-8);
        prop_assert!((m1[0].sir_db - m2[0].sir_db).abs() < 1e-8);
        prop_assert!((m1[0].sar_db - m2[0].sar_db).abs() < 1e-8);
    }
}
