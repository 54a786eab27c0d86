//! Joint training of network weights and dictionary with AdaMax.
//!
//! Every random choice is a pure function of `(seed, counters)`, so a run
//! restored from a checkpoint continues bit-exactly.

use std::path::Path;

use log::{info, warn};
use num_complex::Complex64;
use rand::Rng;

use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gabor::{analyze, TimeSignal};
use crate::inference::separate;
use crate::metrics::{bss_eval_matched, mean_sdr, TrackMetrics};
use crate::network::UNet;
use crate::objectives::{dict_bound_loss_grad, LossParts};
use crate::rollout::{frame_gradient, stream, stream_seed, SamplePlan};
use crate::tonemodel::Dictionary;

const INIT_STREAM: u64 = 1;
const PERM_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_dict: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Training frames use the hop divided by this factor.
    pub augment_factor: usize,
    pub seeds: Vec<u64>,
    pub freeze_dictionary: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Extra checkpoint at this iteration.
    pub report_at: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 70000,
            batch_size: 6,
            lr_theta: 1e-3,
            lr_dict: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            augment_factor: 4,
            seeds: (0..6).collect(),
            freeze_dictionary: false,
            checkpoint_every: 2500,
            log_every: 100,
            report_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.lr_theta > 0.0 && self.lr_dict > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 || self.augment_factor == 0 {
            return bad("batch_size and augment_factor must be at least 1");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed required");
        }
        Ok(())
    }
}

/// First-moment and infinity-norm accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    /// One entry per group.
    pub inf: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize, groups: usize) -> Self {
        Self {
            first: vec![0.0; n],
            inf: vec![0.0; groups],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub theta: Moments,
    /// Infinity norm shared per dictionary column.
    pub dict: Moments,
    /// Number of applied steps.
    pub tau: u64,
}

impl OptimizerState {
    pub fn new(n_theta: usize, dict: &Dictionary) -> Self {
        Self {
            theta: Moments::zeros(n_theta, n_theta),
            dict: Moments::zeros(dict.entries.len(), dict.n_ins),
            tau: 0,
        }
    }
}

/// AdaMax update of `params` at step `tau >= 1`. Parameter `i` shares its
/// infinity-norm accumulator with every other parameter of group `group(i)`.
#[allow(clippy::too_many_arguments)]
pub fn adamax_grouped(
    params: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    group: impl Fn(usize) -> usize,
    lr: f64,
    tau: u64,
    cfg: &TrainConfig,
) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.first.len());
    state.inf.iter_mut().for_each(|u| *u *= cfg.beta2);
    for (i, g) in grad.iter().enumerate() {
        let u = &mut state.inf[group(i)];
        *u = u.max(g.abs());
    }
    let step = lr / (1.0 - cfg.beta1.powi(tau as i32));
    for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
        let m = &mut state.first[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *p -= step * *m / (state.inf[group(i)] + cfg.eps);
    }
}

/// Elementwise AdaMax update.
pub fn adamax_step(params: &mut [f64], grad: &[f64], state: &mut Moments, lr: f64, tau: u64, cfg: &TrainConfig) {
    adamax_grouped(params, grad, state, |i| i, lr, tau, cfg)
}

/// Dictionary update; the denominator is the maximum over the harmonics of
/// each instrument column.
pub fn adamax_dict_step(dict: &mut Dictionary, grad: &[f64], state: &mut Moments, lr: f64, tau: u64, cfg: &TrainConfig) {
    let n_ins = dict.n_ins;
    adamax_grouped(&mut dict.entries, grad, state, |i| i % n_ins, lr, tau, cfg)
}

pub fn init_dictionary(n_har: usize, n_ins: usize) -> Result<Dictionary> {
    if n_har == 0 || n_ins == 0 {
        return Err(Error::InvalidConfig("dictionary needs at least one harmonic and one instrument".into()));
    }
    Ok(Dictionary::initial(n_har, n_ins))
}

/// Windowed means of the loss parts, plus optional separation metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    pub sparse_abs: f64,
    pub direct_rad: f64,
    pub regularizer: f64,
    pub metrics: Option<TrackMetrics>,
}

const ROW_LEN: usize = 7;

impl HistoryRow {
    fn to_f64s(self) -> [f64; ROW_LEN] {
        let m = self.metrics.map_or([f64::NAN; 3], |m| [m.sdr_db, m.sir_db, m.sar_db]);
        [self.iteration as f64, self.sparse_abs, self.direct_rad, self.regularizer, m[0], m[1], m[2]]
    }

    fn from_f64s(r: &[f64]) -> Self {
        Self {
            iteration: r[0] as u64,
            sparse_abs: r[1],
            direct_rad: r[2],
            regularizer: r[3],
            metrics: (!r[4].is_nan()).then_some(TrackMetrics {
                sdr_db: r[4],
                sir_db: r[5],
                sar_db: r[6],
            }),
        }
    }
}

/// Complete resumable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub run: RunConfig,
    pub seed: u64,
    /// Attempted steps, including skipped ones.
    pub iteration: u64,
    pub net: UNet,
    pub dict: Dictionary,
    pub opt: OptimizerState,
    pub history: Vec<HistoryRow>,
    /// Steps whose gradient was not finite.
    pub skipped: u64,
    window: [f64; 4],
}

impl TrainState {
    pub fn new(run: RunConfig, seed: u64) -> Result<Self> {
        run.validate()?;
        let net = UNet::new(run.model.unet.clone(), &mut stream(&[seed, INIT_STREAM]))?;
        let dict = init_dictionary(run.model.n_har, run.model.n_ins())?;
        let opt = OptimizerState::new(net.num_params(), &dict);
        Ok(Self {
            run,
            seed,
            iteration: 0,
            net,
            dict,
            opt,
            history: Vec::new(),
            skipped: 0,
            window: [0.0; 4],
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_bytes("config", self.run.to_text().into_bytes());
        c.put_u64("seed", self.seed);
        c.put_u64("iteration", self.iteration);
        c.put_u64("skipped", self.skipped);
        c.put_u64("tau", self.opt.tau);
        c.put_f64("theta", self.net.flat_params());
        c.put_f64("theta.first", self.opt.theta.first.clone());
        c.put_f64("theta.inf", self.opt.theta.inf.clone());
        c.put_f64("dict", self.dict.entries.clone());
        c.put_f64("dict.first", self.opt.dict.first.clone());
        c.put_f64("dict.inf", self.opt.dict.inf.clone());
        c.put_f64("history", self.history.iter().flat_map(|r| r.to_f64s()).collect());
        c.put_f64("window", self.window.to_vec());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let run = RunConfig::parse(&c.text("config")?)?;
        let mut s = Self::new(run, c.u64("seed")?)?;
        let sized = |name: &str, n: usize| -> Result<Vec<f64>> {
            let v = c.f64s(name)?;
            if v.len() != n {
                return Err(Error::Checkpoint(format!("entry `{name}` has {} values, expected {n}", v.len())));
            }
            Ok(v.to_vec())
        };
        let np = s.net.num_params();
        let nd = s.dict.entries.len();
        s.net.set_flat_params(&sized("theta", np)?)?;
        s.opt.theta.first = sized("theta.first", np)?;
        s.opt.theta.inf = sized("theta.inf", np)?;
        s.dict.entries = sized("dict", nd)?;
        s.opt.dict.first = sized("dict.first", nd)?;
        s.opt.dict.inf = sized("dict.inf", s.dict.n_ins)?;
        s.opt.tau = c.u64("tau")?;
        s.iteration = c.u64("iteration")?;
        s.skipped = c.u64("skipped")?;
        let h = c.f64s("history")?;
        if h.len() % ROW_LEN != 0 {
            return Err(Error::Checkpoint("history has a partial row".into()));
        }
        s.history = h.chunks_exact(ROW_LEN).map(HistoryRow::from_f64s).collect();
        s.window.copy_from_slice(&sized("window", 4)?);
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_container().to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_container(&Container::from_bytes(&bytes)?)
    }

    /// Closes the current averaging window into a history row.
    fn flush_window(&mut self) {
        if self.window[3] > 0.0 {
            let n = self.window[3];
            self.history.push(HistoryRow {
                iteration: self.iteration,
                sparse_abs: self.window[0] / n,
                direct_rad: self.window[1] / n,
                regularizer: self.window[2] / n,
                metrics: None,
            });
        }
        self.window = [0.0; 4];
    }

    /// Attaches separation metrics to the row of the current iteration.
    pub fn record_metrics(&mut self, metrics: TrackMetrics) {
        if self.history.last().is_none_or(|r| r.iteration != self.iteration) {
            self.flush_window();
        }
        match self.history.last_mut() {
            Some(r) if r.iteration == self.iteration => r.metrics = Some(metrics),
            _ => self.history.push(HistoryRow {
                iteration: self.iteration,
                sparse_abs: f64::NAN,
                direct_rad: f64::NAN,
                regularizer: f64::NAN,
                metrics: Some(metrics),
            }),
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub parts: LossParts,
    pub loss: f64,
    pub applied: bool,
}

pub struct Trainer {
    pub state: TrainState,
    /// Unit-max training frames on the augmented lattice.
    frames: Vec<Vec<Complex64>>,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(state: TrainState, signal: &TimeSignal) -> Result<Self> {
        let model = &state.run.model;
        let lattice = model.gabor.with_time_step_divided(state.run.train.augment_factor)?;
        let mut spec = analyze(signal, &lattice)?;
        let max = spec.max_abs();
        if max > 0.0 {
            spec.scale(1.0 / max);
        }
        let frames: Vec<Vec<Complex64>> = (0..spec.n_len).map(|k| spec.frame(k).to_vec()).collect();
        if frames.is_empty() {
            return Err(Error::SignalTooShort("no frames to train on".into()));
        }
        Ok(Self {
            state,
            frames,
            epoch: None,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Frame used at flat batch position `idx`; a fresh permutation per epoch.
    pub fn frame_at(&mut self, idx: u64) -> usize {
        let n = self.frames.len() as u64;
        let epoch = idx / n;
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let p = permutation(&mut stream(&[self.state.seed, PERM_STREAM, epoch]), n as usize);
            self.epoch = Some((epoch, p));
        }
        self.epoch.as_ref().unwrap().1[(idx % n) as usize]
    }

    /// One batch: sums the frame gradients, then updates network and dictionary.
    pub fn step(&mut self) -> Result<StepReport> {
        let seed = self.state.seed;
        let it = self.state.iteration;
        let batch = self.state.run.train.batch_size;
        let m = self.state.run.model.n_ins();
        self.state.net.zero_grad();
        let mut dict_grad = vec![0.0; self.state.dict.entries.len()];
        let mut parts = LossParts::default();
        let mut loss = 0.0;
        let mut finite = true;
        for b in 0..batch {
            let k = self.frame_at(it * batch as u64 + b as u64);
            let s = &mut self.state;
            let plans = SamplePlan::lifted(&s.run.model.lift, m, &[seed, SAMPLE_STREAM, it, b as u64]);
            let noise = stream_seed(&[seed, NOISE_STREAM, it, b as u64]);
            let out = match frame_gradient(&s.run.model, &mut s.net, &s.dict, &self.frames[k], noise, &plans) {
                Ok(o) => o,
                Err(Error::Domain(e)) => {
                    warn!("seed {seed} iteration {it}: {e}");
                    finite = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            let (bound, gb) = dict_bound_loss_grad(&s.dict)?;
            dict_grad.iter_mut().zip(out.dict_grad.iter().zip(gb)).for_each(|(a, (x, y))| *a += x + y);
            let p = out.mean_parts();
            parts.sparse_abs += p.sparse_abs / batch as f64;
            parts.direct_rad += p.direct_rad / batch as f64;
            parts.regularizer += p.regularizer / batch as f64;
            loss += (out.mean_loss() + bound) / batch as f64;
        }
        let s = &mut self.state;
        s.iteration += 1;
        let grads = s.net.flat_grads();
        finite &= loss.is_finite() && grads.iter().chain(&dict_grad).all(|g| g.is_finite());
        if !finite {
            warn!("seed {seed} iteration {}: non-finite gradient, step skipped", s.iteration);
            s.skipped += 1;
            return Ok(StepReport {
                parts,
                loss,
                applied: false,
            });
        }
        s.opt.tau += 1;
        let cfg = &s.run.train;
        let mut theta = s.net.flat_params();
        adamax_step(&mut theta, &grads, &mut s.opt.theta, cfg.lr_theta, s.opt.tau, cfg);
        s.net.set_flat_params(&theta)?;
        if !cfg.freeze_dictionary {
            adamax_dict_step(&mut s.dict, &dict_grad, &mut s.opt.dict, cfg.lr_dict, s.opt.tau, cfg);
            s.dict.project_nonnegative();
        }
        s.window[0] += parts.sparse_abs;
        s.window[1] += parts.direct_rad;
        s.window[2] += parts.regularizer;
        s.window[3] += 1.0;
        if s.iteration % cfg.log_every as u64 == 0 {
            s.flush_window();
        }
        Ok(StepReport {
            parts,
            loss,
            applied: true,
        })
    }

    /// Whether iteration `it` ends with a checkpoint.
    pub fn is_checkpoint(&self, it: u64) -> bool {
        let t = &self.state.run.train;
        it % t.checkpoint_every as u64 == 0 || t.report_at == Some(it as usize) || it == t.iterations as u64
    }

    /// Steps until `iterations`, calling `hook` after every checkpoint step
    /// (and once at the start if nothing has run yet).
    pub fn run<E: From<Error>>(
        &mut self,
        mut hook: impl FnMut(&mut Trainer) -> std::result::Result<(), E>,
    ) -> std::result::Result<(), E> {
        let until = self.state.run.train.iterations as u64;
        if self.state.iteration == 0 {
            hook(self)?;
        }
        while self.state.iteration < until {
            let r = self.step()?;
            let it = self.state.iteration;
            if it % self.state.run.train.log_every as u64 == 0 {
                info!(
                    "seed {} it {it}: loss {:.5} (abs {:.5}, rad {:.5}, reg {:.5})",
                    self.state.seed, r.loss, r.parts.sparse_abs, r.parts.direct_rad, r.parts.regularizer
                );
            }
            if self.is_checkpoint(it) {
                hook(self)?;
            }
        }
        Ok(())
    }
}

/// Index of the highest mean SDR; `None` if no run has metrics.
pub fn select_best(scores: &[Option<Vec<TrackMetrics>>]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|m| (i, mean_sdr(m))))
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Mean metrics over tracks.
pub fn mean_metrics(m: &[TrackMetrics]) -> TrackMetrics {
    let n = m.len().max(1) as f64;
    TrackMetrics {
        sdr_db: m.iter().map(|x| x.sdr_db).sum::<f64>() / n,
        sir_db: m.iter().map(|x| x.sir_db).sum::<f64>() / n,
        sar_db: m.iter().map(|x| x.sar_db).sum::<f64>() / n,
    }
}

/// Separation metrics of the current parameters against `references`.
/// Learned instrument indices are arbitrary, so tracks are matched to the
/// references by the assignment with the best mean SDR.
pub fn evaluate_state(
    state: &TrainState,
    mixture: &TimeSignal,
    references: &[TimeSignal],
) -> Result<Vec<TrackMetrics>> {
    let tracks = separate(mixture, &state.run.model, &state.net, &state.dict)?;
    Ok(bss_eval_matched(&tracks, references)?.1)
}

pub struct Ensemble {
    pub runs: Vec<TrainState>,
    /// Final metrics per run when references were given.
    pub scores: Vec<Option<Vec<TrackMetrics>>>,
    pub best: Option<usize>,
}

/// Trains one run per configured seed. With references, metrics are
/// recorded at every checkpoint and the best final run is selected.
pub fn run_ensemble(
    signal: &TimeSignal,
    run: &RunConfig,
    references: Option<&[TimeSignal]>,
    mut hook: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Ensemble> {
    run.validate()?;
    let mut runs = Vec::new();
    let mut scores = Vec::new();
    for &seed in &run.train.seeds {
        let mut trainer = Trainer::new(TrainState::new(run.clone(), seed)?, signal)?;
        let mut last = None;
        trainer.run(|t| -> Result<()> {
            if let Some(refs) = references {
                let m = evaluate_state(&t.state, signal, refs)?;
                t.state.record_metrics(mean_metrics(&m));
                last = Some(m);
            }
            hook(t)
        })?;
        runs.push(trainer.state);
        scores.push(last);
    }
    let best = select_best(&scores);
    Ok(Ensemble { runs, scores, best })
}
