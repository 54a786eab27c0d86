//! Inspects a checkpoint trained on the default synthetic mixture: the
//! learned dictionary, decoded tones next to the true fundamental bins, and
//! separation scores with the learned and with an oracle instrument choice.
//!
//! Usage: `cargo run --release --example inspect_checkpoint -- run.ckpt`

use unmix::fixtures::{two_part_mixture, MixtureSpec};
use unmix::gabor::{analyze, synthesize, Spectrogram};
use unmix::inference::{decode_frame, separate};
use unmix::metrics::{bss_eval, bss_eval_matched};
use unmix::trainer::TrainState;
use unmix::Complex64;

/// Strongest bin of a frame, or `None` below 1 % of `floor`.
fn peak_bin(frame: &[Complex64], floor: f64) -> Option<usize> {
    let (i, v) = frame
        .iter()
        .enumerate()
        .fold((0, 0.0), |a, (i, z)| if z.norm() > a.1 { (i, z.norm()) } else { a });
    (v > 0.01 * floor).then_some(i)
}

fn main() -> unmix::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let st = TrainState::load(std::path::Path::new(&path))?;
    let cfg = &st.run.model;
    println!("dictionary (h: columns)");
    for h in 0..st.dict.n_har {
        let row: Vec<String> = (0..st.dict.n_ins).map(|e| format!("{:.3}", st.dict.get(h, e))).collect();
        println!("  {:2}: {}", h + 1, row.join(" "));
    }

    let mix = two_part_mixture(&MixtureSpec::default())?;
    let mut y = analyze(&mix.mixture, &cfg.gabor)?;
    let sources = [analyze(&mix.sources[0], &cfg.gabor)?, analyze(&mix.sources[1], &cfg.gabor)?];
    let max = y.max_abs();
    y.scale(1.0 / max);

    let show = |b: Option<usize>| b.map_or("  -".to_string(), |b| format!("{b:3}"));
    let mut oracle = vec![Spectrogram::zeros(cfg.gabor, y.n_len, y.n_samples); 2];
    for k in 0..y.n_len {
        let p = decode_frame(cfg, &st.net, &st.dict, y.frame(k))?;
        if k % (y.n_len / 40).max(1) == 0 {
            let tones: Vec<String> = p
                .tones
                .iter()
                .map(|t| format!("nu {:3}{:+.2} eta {} u {} a {:.3}", t.nu, t.nu_tilde, t.eta, t.u as u8, t.a))
                .collect();
            println!(
                "frame {k:4} true {} {} | {}",
                show(peak_bin(sources[0].frame(k), max)),
                show(peak_bin(sources[1].frame(k), max)),
                tones.join(" | ")
            );
        }
        // Oracle choice: each kept tone goes to the source it overlaps most.
        for (t, yd) in p.tones.iter().zip(&p.y_dir) {
            if !t.u {
                continue;
            }
            let overlap = |s: &[Complex64]| s.iter().zip(yd).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
            let j = usize::from(overlap(sources[0].frame(k)) < overlap(sources[1].frame(k)));
            oracle[j].frame_mut(k).iter_mut().zip(yd).for_each(|(o, v)| *o += v * max);
        }
    }

    let tracks = separate(&mix.mixture, cfg, &st.net, &st.dict)?;
    let sum: Vec<f64> = tracks[0].samples.iter().zip(&tracks[1].samples).map(|(a, b)| a + b).collect();
    let err: f64 = sum.iter().zip(&mix.mixture.samples).map(|(a, b)| (a - b).powi(2)).sum();
    println!("summed tracks vs mixture: {:.2} dB", 10.0 * (mix.mixture.energy() / err).log10());
    let oracle: Vec<_> = oracle.iter().map(synthesize).collect::<unmix::Result<_>>()?;
    for (name, m) in [
        ("learned", bss_eval_matched(&tracks, &mix.sources)?.1),
        ("oracle", bss_eval(&oracle, &mix.sources)?),
    ] {
        for (i, t) in m.iter().enumerate() {
            println!("{name} track {i}: SDR {:.2} SIR {:.2} SAR {:.2}", t.sdr_db, t.sir_db, t.sar_db);
        }
    }
    Ok(())
}
