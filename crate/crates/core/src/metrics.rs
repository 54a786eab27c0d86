//! Source-separation quality: SDR, SIR and SAR by orthogonal projection onto
//! the references, without any time shift or distortion filter.

use crate::error::{Error, Result};
use crate::gabor::TimeSignal;
use crate::linalg::{cholesky, cholesky_solve};

/// Reported ratios are clamped to `[-DB_CAP, DB_CAP]`.
pub const DB_CAP: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackMetrics {
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
}

/// Energies of the orthogonal decomposition `e = s_target + e_interf + e_artif`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub target: f64,
    pub interference: f64,
    pub artifacts: f64,
}

impl Decomposition {
    pub fn metrics(&self) -> TrackMetrics {
        TrackMetrics {
            sdr_db: ratio_db(self.target, self.interference + self.artifacts),
            sir_db: ratio_db(self.target, self.interference),
            sar_db: ratio_db(self.target + self.interference, self.artifacts),
        }
    }
}

/// `10 log10(num / den)` with both limits capped.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    // A silent target scores worst even when the rest is silent too.
    if num <= 0.0 {
        return -DB_CAP;
    }
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decomposes each estimate against the references; estimate `j` is scored
/// against reference `j`.
pub fn decompose(estimates: &[&[f64]], references: &[&[f64]]) -> Result<Vec<Decomposition>> {
    let n = references.len();
    if n == 0 || estimates.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} estimates for {} references",
            estimates.len(),
            n
        )));
    }
    let len = references[0].len();
    for x in estimates.iter().chain(references) {
        if x.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: x.len(),
            });
        }
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let g = dot(references[i], references[j]);
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let scale = (0..n).map(|i| gram[i * n + i]).fold(0.0, f64::max);
    let l = cholesky(&gram, n).ok_or(Error::RankDeficient)?;
    // A pivot this small means the references are dependent up to rounding.
    if (0..n).any(|i| l[i * n + i] * l[i * n + i] <= 1e-12 * scale) {
        return Err(Error::RankDeficient);
    }

    let mut out = Vec::with_capacity(n);
    for (j, e) in estimates.iter().enumerate() {
        let sj = references[j];
        let ss = gram[j * n + j];
        let a = dot(e, sj) / ss;
        let mut c: Vec<f64> = references.iter().map(|s| dot(e, s)).collect();
        cholesky_solve(&l, n, &mut c);
        let mut target = 0.0;
        let mut interf = 0.0;
        let mut artif = 0.0;
        for t in 0..len {
            let st = a * sj[t];
            let ps: f64 = (0..n).map(|i| c[i] * references[i][t]).sum();
            target += st * st;
            interf += (ps - st) * (ps - st);
            artif += (e[t] - ps) * (e[t] - ps);
        }
        out.push(Decomposition {
            target,
            interference: interf,
            artifacts: artif,
        });
    }
    Ok(out)
}

/// Per-track SDR, SIR and SAR in dB.
pub fn bss_eval(estimates: &[TimeSignal], references: &[TimeSignal]) -> Result<Vec<TrackMetrics>> {
    let e: Vec<&[f64]> = estimates.iter().map(|s| s.samples.as_slice()).collect();
    let r: Vec<&[f64]> = references.iter().map(|s| s.samples.as_slice()).collect();
    Ok(decompose(&e, &r)?.iter().map(Decomposition::metrics).collect())
}

/// Scores every assignment of estimates to references and returns the one
/// with the highest mean SDR, as `(perm, metrics)` where estimate `perm[j]`
/// is scored against reference `j`.
pub fn bss_eval_matched(estimates: &[TimeSignal], references: &[TimeSignal]) -> Result<(Vec<usize>, Vec<TrackMetrics>)> {
    let n = estimates.len();
    let mut best: Option<(Vec<usize>, Vec<TrackMetrics>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let est: Vec<TimeSignal> = perm.iter().map(|&i| estimates[i].clone()).collect();
        let m = bss_eval(&est, references)?;
        if best.as_ref().is_none_or(|(_, b)| mean_sdr(&m) > mean_sdr(b)) {
            best = Some((perm.clone(), m));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Mean SDR over tracks.
pub fn mean_sdr(metrics: &[TrackMetrics]) -> f64 {
    metrics.iter().map(|m| m.sdr_db).sum::<f64>() / metrics.len().max(1) as f64
}
