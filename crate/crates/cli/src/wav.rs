//! Mono WAV input and 32-bit float output.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use log::warn;
use unmix::gabor::TimeSignal;

/// Reads 16/24/32-bit PCM or 32-bit float; several channels are averaged.
pub fn read_mono(path: &Path) -> Result<TimeSignal> {
    let reader = WavReader::open(path).with_context(|| format!("cannot open WAV file {}", path.display()))?;
    let spec = reader.spec();
    let ch = spec.channels as usize;
    let raw: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (f, b) => bail!("{}: unsupported sample format {f:?} with {b} bits", path.display()),
    };
    if ch > 1 {
        warn!("{}: averaging {ch} channels to mono", path.display());
    }
    let samples = raw.chunks_exact(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok(TimeSignal::new(samples, spec.sample_rate as f64)?)
}

pub fn write_mono(path: &Path, signal: &TimeSignal) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz.round() as u32,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).with_context(|| format!("cannot create {}", path.display()))?;
    for &x in &signal.samples {
        w.write_sample(x as f32)?;
    }
    w.finalize()?;
    Ok(())
}
