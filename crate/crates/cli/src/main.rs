use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use unmix::config::RunConfig;
use unmix::gabor::{GaborConfig, TimeSignal};
use unmix::inference::separate;
use unmix::metrics::{bss_eval, TrackMetrics};
use unmix::tonemodel::Dictionary;
use unmix::trainer::{evaluate_state, mean_metrics, select_best, HistoryRow, TrainState, Trainer};

mod wav;

#[derive(Parser)]
#[command(name = "unmix", version, about = "Blind separation of monaural music into instrument tracks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed on a mixture.
    Train(TrainArgs),
    /// Split a recording into one WAV per instrument.
    Separate(SeparateArgs),
    /// Score estimated tracks against references (SDR, SIR, SAR).
    Evaluate(EvaluateArgs),
    /// Export loss and metric curves of training runs as CSV.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Mixture WAV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, one run each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    instruments: Option<usize>,
    /// Keep the dictionary fixed at its initial (or given) value.
    #[arg(long)]
    freeze_dictionary: bool,
    /// Dictionary CSV (`h,inst1,inst2,...`) to start from.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reference tracks in instrument order; enables metrics and best-run selection.
    #[arg(long, num_args = 1..)]
    references: Vec<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated tracks.
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    /// References in the same order.
    #[arg(long, num_args = 1.., required = true)]
    references: Vec<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Training output directories or `history.csv` files.
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
    /// Also export this checkpoint's dictionary.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    if let Err(e) = r {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned())
}

fn build_config(a: &TrainArgs, sample_rate: f64) -> Result<RunConfig> {
    let mut base = RunConfig::paper(a.instruments.unwrap_or(2));
    base.model.gabor = GaborConfig::for_sample_rate(sample_rate);
    let mut run = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            RunConfig::parse_onto(base, &text).with_context(|| format!("in config {}", p.display()))?
        }
        None => base,
    };
    if let Some(n) = a.instruments {
        run.model.unet.n_ins = n;
    }
    if let Some(t) = a.iterations {
        run.train.iterations = t;
    }
    if let Some(s) = a.seed {
        run.train.seeds = vec![s];
    }
    if let Some(s) = &a.seeds {
        run.train.seeds = s.clone();
    }
    run.train.freeze_dictionary |= a.freeze_dictionary;
    run.validate()?;
    Ok(run)
}

fn read_dictionary(path: &Path) -> Result<Dictionary> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let n_ins = r.headers()?.len().saturating_sub(1);
    let mut entries = Vec::new();
    let mut n_har = 0;
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().skip(1) {
            entries.push(v.trim().parse::<f64>().with_context(|| format!("bad dictionary entry `{v}`"))?);
        }
        n_har += 1;
    }
    Ok(Dictionary::new(n_har, n_ins, entries)?)
}

fn write_dictionary(path: &Path, d: &Dictionary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["h".to_string()];
    header.extend((1..=d.n_ins).map(|e| format!("inst{e}")));
    w.write_record(&header)?;
    for h in 0..d.n_har {
        let mut row = vec![(h + 1).to_string()];
        row.extend((0..d.n_ins).map(|e| d.get(h, e).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const HISTORY_HEADER: [&str; 7] = ["iteration", "sparse_abs", "direct_rad", "regularizer", "sdr_db", "sir_db", "sar_db"];

fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        let m = |f: fn(&TrackMetrics) -> f64| r.metrics.as_ref().map_or(String::new(), |m| f(m).to_string());
        w.write_record([
            r.iteration.to_string(),
            r.sparse_abs.to_string(),
            r.direct_rad.to_string(),
            r.regularizer.to_string(),
            m(|m| m.sdr_db),
            m(|m| m.sir_db),
            m(|m| m.sar_db),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_references(paths: &[PathBuf]) -> Result<Vec<TimeSignal>> {
    paths.iter().map(|p| wav::read_mono(p)).collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let signal = wav::read_mono(&a.input)?;
    fs::create_dir_all(&a.output_dir).with_context(|| format!("cannot create {}", a.output_dir.display()))?;
    let refs = read_references(&a.references)?;
    let initial: Vec<TrainState> = match &a.checkpoint {
        Some(p) => {
            let mut s = TrainState::load(p).with_context(|| format!("cannot load checkpoint {}", p.display()))?;
            if let Some(t) = a.iterations {
                s.run.train.iterations = t;
            }
            vec![s]
        }
        None => {
            let run = build_config(&a, signal.sample_rate_hz)?;
            fs::write(a.output_dir.join("config.txt"), run.to_text())?;
            let dict = a.dictionary.as_deref().map(read_dictionary).transpose()?;
            run.train
                .seeds
                .iter()
                .map(|&seed| {
                    let mut s = TrainState::new(run.clone(), seed)?;
                    if let Some(d) = &dict {
                        if d.n_har != s.dict.n_har || d.n_ins != s.dict.n_ins {
                            bail!("dictionary is {}x{}, model expects {}x{}", d.n_har, d.n_ins, s.dict.n_har, s.dict.n_ins);
                        }
                        s.dict = d.clone();
                    }
                    Ok(s)
                })
                .collect::<Result<_>>()?
        }
    };
    if !refs.is_empty() && refs.len() != initial[0].run.model.n_ins() {
        bail!("{} references for {} instruments", refs.len(), initial[0].run.model.n_ins());
    }

    let mut scores = Vec::new();
    for state in initial {
        let seed = state.seed;
        let dir = a.output_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        let mut trainer = Trainer::new(state, &signal)?;
        let mut last = None;
        trainer.run(|t| -> Result<()> {
            if !refs.is_empty() {
                let m = evaluate_state(&t.state, &signal, &refs)?;
                let mm = mean_metrics(&m);
                info!(
                    "seed {seed} it {}: SDR {:.2} SIR {:.2} SAR {:.2}",
                    t.state.iteration, mm.sdr_db, mm.sir_db, mm.sar_db
                );
                t.state.record_metrics(mm);
                last = Some(m);
            }
            t.state.save(&dir.join(format!("checkpoint-{}.ckpt", t.state.iteration)))?;
            t.state.save(&dir.join("latest.ckpt"))?;
            write_history(&dir.join("history.csv"), &t.state.history)
        })?;
        if trainer.state.skipped > 0 {
            log::warn!("seed {seed}: {} steps skipped on non-finite gradients", trainer.state.skipped);
        }
        scores.push((seed, last));
    }
    let metrics: Vec<_> = scores.iter().map(|(_, m)| m.clone()).collect();
    if let Some(best) = select_best(&metrics) {
        let seed = scores[best].0;
        info!("best run: seed {seed}");
        fs::write(a.output_dir.join("best.txt"), format!("seed{seed}\n"))?;
    }
    Ok(())
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint).with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let signal = wav::read_mono(&a.input)?;
    let tracks = separate(&signal, &state.run.model, &state.net, &state.dict)?;
    fs::create_dir_all(&a.output_dir)?;
    let stem = stem(&a.input);
    for (i, t) in tracks.iter().enumerate() {
        let p = a.output_dir.join(format!("{stem}.inst{}.wav", i + 1));
        wav::write_mono(&p, t)?;
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let est = read_references(&a.input)?;
    let refs = read_references(&a.references)?;
    let m = bss_eval(&est, &refs)?;
    fs::create_dir_all(&a.output_dir)?;
    let mut w = csv::Writer::from_path(a.output_dir.join("metrics.csv"))?;
    w.write_record(["track", "sdr_db", "sir_db", "sar_db"])?;
    println!("{:<24} {:>9} {:>9} {:>9}", "track", "SDR dB", "SIR dB", "SAR dB");
    for (p, m) in a.input.iter().zip(&m) {
        let name = stem(p);
        println!("{name:<24} {:>9.3} {:>9.3} {:>9.3}", m.sdr_db, m.sir_db, m.sar_db);
        w.write_record([name, m.sdr_db.to_string(), m.sir_db.to_string(), m.sar_db.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `(run label, history file)` for each input.
fn history_files(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_file() {
            let label = p.parent().map_or("run".into(), stem);
            out.push((label, p.clone()));
            continue;
        }
        if p.join("history.csv").is_file() {
            out.push((stem(p), p.join("history.csv")));
            continue;
        }
        let mut found: Vec<_> = fs::read_dir(p)
            .with_context(|| format!("cannot read {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("history.csv").is_file())
            .collect();
        if found.is_empty() {
            bail!("no history.csv under {}", p.display());
        }
        found.sort();
        out.extend(found.into_iter().map(|d| (stem(&d), d.join("history.csv"))));
    }
    Ok(out)
}

fn cmd_plot_data(a: PlotArgs) -> Result<()> {
    fs::create_dir_all(&a.output_dir)?;
    let mut losses = csv::Writer::from_path(a.output_dir.join("losses.csv"))?;
    losses.write_record(["run", "iteration", "sparse_abs", "direct_rad", "regularizer"])?;
    let mut perf = csv::Writer::from_path(a.output_dir.join("performance.csv"))?;
    perf.write_record(["run", "iteration", "sdr_db", "sir_db", "sar_db"])?;
    for (label, path) in history_files(&a.input)? {
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("cannot read {}", path.display()))?;
        if r.headers()?.iter().collect::<Vec<_>>() != HISTORY_HEADER {
            bail!("{} is not a training history", path.display());
        }
        for rec in r.records() {
            let rec = rec?;
            if !rec[1].is_empty() && rec[1].to_lowercase() != "nan" {
                losses.write_record([&label, &rec[0], &rec[1], &rec[2], &rec[3]])?;
            }
            if !rec[4].is_empty() {
                perf.write_record([&label, &rec[0], &rec[4], &rec[5], &rec[6]])?;
            }
        }
    }
    losses.flush()?;
    perf.flush()?;
    if let Some(c) = &a.checkpoint {
        let s = TrainState::load(c).with_context(|| format!("cannot load checkpoint {}", c.display()))?;
        write_dictionary(&a.output_dir.join("dictionary.csv"), &s.dict)?;
    }
    Ok(())
}
