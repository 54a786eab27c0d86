//! Trains the reduced model on the synthetic two-part mixture and prints the
//! loss and separation metrics at every checkpoint.
//!
//! Usage: `cargo run --release --example train_synthetic [iterations] [seed] [final.ckpt] [overrides.cfg]`
//! Set `ORACLE_DICTIONARY=1` to start from the generating dictionary.

use std::time::Instant;

use unmix::fixtures::{reduced_run_config, reference_dictionary, two_part_mixture, MixtureSpec};
use unmix::trainer::{evaluate_state, mean_metrics, TrainState, Trainer};

fn main() -> unmix::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut run = reduced_run_config();
    if let Some(t) = args.get(1) {
        run.train.iterations = t.parse().expect("iterations");
    }
    if let Some(path) = args.get(4) {
        let text = std::fs::read_to_string(path).expect("readable overrides");
        run = unmix::config::RunConfig::parse_onto(run, &text)?;
    }
    let seed = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    let mix = two_part_mixture(&MixtureSpec::default())?;
    let mut state = TrainState::new(run, seed)?;
    // Oracle timbres: start from (and, with `freeze_dictionary`, keep) the
    // dictionary that generated the mixture.
    if std::env::var_os("ORACLE_DICTIONARY").is_some() {
        state.dict = reference_dictionary(state.dict.n_har);
    }
    let mut trainer = Trainer::new(state, &mix.mixture)?;
    println!("{} training frames, {} parameters", trainer.n_frames(), trainer.state.net.num_params());
    let start = Instant::now();
    trainer.run(|t| -> unmix::Result<()> {
        let m = evaluate_state(&t.state, &mix.mixture, &mix.sources)?;
        let mm = mean_metrics(&m);
        let last = t.state.history.last();
        println!(
            "it {:5} {:7.1}s  abs {:.4} rad {:.4} reg {:.4}  SDR {:6.2} SIR {:6.2} SAR {:6.2}  skipped {}",
            t.state.iteration,
            start.elapsed().as_secs_f64(),
            last.map_or(f64::NAN, |r| r.sparse_abs),
            last.map_or(f64::NAN, |r| r.direct_rad),
            last.map_or(f64::NAN, |r| r.regularizer),
            mm.sdr_db,
            mm.sir_db,
            mm.sar_db,
            t.state.skipped
        );
        t.state.record_metrics(mm);
        Ok(())
    })?;
    if let Some(path) = args.get(3) {
        trainer.state.save(std::path::Path::new(path))?;
    }
    Ok(())
}
