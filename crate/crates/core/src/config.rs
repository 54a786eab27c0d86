//! Flat `key = value` text form of a model and training configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key is
//! optional; missing keys keep their defaults. Floats are written in their
//! shortest round-trip form, so `to_text(parse(to_text(c)))` is stable.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::phasesolver::Regularization;
use crate::rollout::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn paper(n_ins: usize) -> Self {
        Self {
            model: ModelConfig::paper(n_ins),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let g = &m.gabor;
        let u = &m.unet;
        let l = &m.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("sample_rate_hz", f(g.sample_rate_hz));
        kv("zeta_s", f(g.zeta_s));
        kv("alpha_s", f(g.alpha_s));
        kv("beta_hz", f(g.beta_hz));
        kv("n_spc", g.n_spc.to_string());
        kv("instruments", u.n_ins.to_string());
        kv("strides", list(&u.strides));
        kv("channels", list(&u.channels));
        kv("kernel", u.kernel.to_string());
        kv("head_kernels", list(&u.head_kernels));
        kv("head_channels", u.head_channels.to_string());
        kv("coord_start", f(u.coord_start));
        kv("coord_end", f(u.coord_end));
        kv("n_har", m.n_har.to_string());
        kv("nu_min", m.nu_min.to_string());
        kv("nu_max", m.nu_max.to_string());
        kv("q", f(l.q));
        kv("delta", f(l.delta));
        kv("mu1", f(l.mu1));
        kv("mu2", f(l.mu2));
        kv("mu3", f(l.mu3));
        kv("lambda", f(l.lambda));
        kv("rad_eps", f(l.rad_eps));
        kv(
            "ridge",
            match m.regularization {
                Regularization::Absolute(r) => format!("absolute:{}", f(r)),
                Regularization::Relative(r) => format!("relative:{}", f(r)),
            },
        );
        kv("input_noise", f(m.input_noise));
        kv("log_rate_offset", f(m.log_rate_offset));
        kv("lift_values", m.lift.r_values.iter().map(|v| f(*v)).collect::<Vec<_>>().join(","));
        kv("iterations", t.iterations.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_theta", f(t.lr_theta));
        kv("lr_dict", f(t.lr_dict));
        kv("beta1", f(t.beta1));
        kv("beta2", f(t.beta2));
        kv("eps", f(t.eps));
        kv("augment_factor", t.augment_factor.to_string());
        kv("seeds", list(&t.seeds));
        kv("freeze_dictionary", t.freeze_dictionary.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("log_every", t.log_every.to_string());
        kv("report_at", t.report_at.map_or("none".to_string(), |r| r.to_string()));
        s
    }

    /// Parses `text` on top of `base`.
    pub fn parse_onto(base: RunConfig, text: &str) -> Result<Self> {
        let mut c = base;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::InvalidConfig(format!("line {}: {msg}", no + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| at(format!("{key}: {e}"));
            let m = &mut c.model;
            let t = &mut c.train;
            match key {
                "sample_rate_hz" => m.gabor.sample_rate_hz = pf(value).map_err(bad)?,
                "zeta_s" => m.gabor.zeta_s = pf(value).map_err(bad)?,
                "alpha_s" => m.gabor.alpha_s = pf(value).map_err(bad)?,
                "beta_hz" => m.gabor.beta_hz = pf(value).map_err(bad)?,
                "n_spc" => m.gabor.n_spc = pu(value).map_err(bad)?,
                "instruments" => m.unet.n_ins = pu(value).map_err(bad)?,
                "strides" => m.unet.strides = plist(value).map_err(bad)?,
                "channels" => m.unet.channels = plist(value).map_err(bad)?,
                "kernel" => m.unet.kernel = pu(value).map_err(bad)?,
                "head_kernels" => m.unet.head_kernels = plist(value).map_err(bad)?,
                "head_channels" => m.unet.head_channels = pu(value).map_err(bad)?,
                "coord_start" => m.unet.coord_start = pf(value).map_err(bad)?,
                "coord_end" => m.unet.coord_end = pf(value).map_err(bad)?,
                "n_har" => m.n_har = pu(value).map_err(bad)?,
                "nu_min" => m.nu_min = pu(value).map_err(bad)?,
                "nu_max" => m.nu_max = pu(value).map_err(bad)?,
                "q" => m.loss.q = pf(value).map_err(bad)?,
                "delta" => m.loss.delta = pf(value).map_err(bad)?,
                "mu1" => m.loss.mu1 = pf(value).map_err(bad)?,
                "mu2" => m.loss.mu2 = pf(value).map_err(bad)?,
                "mu3" => m.loss.mu3 = pf(value).map_err(bad)?,
                "lambda" => m.loss.lambda = pf(value).map_err(bad)?,
                "rad_eps" => m.loss.rad_eps = pf(value).map_err(bad)?,
                "ridge" => {
                    let (kind, v) = value
                        .split_once(':')
                        .ok_or_else(|| bad("expected `relative:<x>` or `absolute:<x>`".into()))?;
                    let v = pf(v.trim()).map_err(bad)?;
                    m.regularization = match kind.trim() {
                        "relative" => Regularization::Relative(v),
                        "absolute" => Regularization::Absolute(v),
                        other => return Err(bad(format!("unknown ridge kind `{other}`"))),
                    };
                }
                "input_noise" => m.input_noise = pf(value).map_err(bad)?,
                "log_rate_offset" => m.log_rate_offset = pf(value).map_err(bad)?,
                "lift_values" => {
                    m.lift.r_values = value
                        .split(',')
                        .map(|v| pf(v.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(bad)?
                }
                "iterations" => t.iterations = pu(value).map_err(bad)?,
                "batch_size" => t.batch_size = pu(value).map_err(bad)?,
                "lr_theta" => t.lr_theta = pf(value).map_err(bad)?,
                "lr_dict" => t.lr_dict = pf(value).map_err(bad)?,
                "beta1" => t.beta1 = pf(value).map_err(bad)?,
                "beta2" => t.beta2 = pf(value).map_err(bad)?,
                "eps" => t.eps = pf(value).map_err(bad)?,
                "augment_factor" => t.augment_factor = pu(value).map_err(bad)?,
                "seeds" => t.seeds = plist(value).map_err(bad)?,
                "freeze_dictionary" => {
                    t.freeze_dictionary = value.parse().map_err(|_| bad(format!("expected true/false, got `{value}`")))?
                }
                "checkpoint_every" => t.checkpoint_every = pu(value).map_err(bad)?,
                "log_every" => t.log_every = pu(value).map_err(bad)?,
                "report_at" => {
                    t.report_at = if value == "none" {
                        None
                    } else {
                        Some(pu(value).map_err(bad)?)
                    }
                }
                other => return Err(at(format!("unknown key `{other}`"))),
            }
        }
        Ok(c)
    }

    /// Parses a complete text; the instrument count defaults to 2.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(RunConfig::paper(2), text)
    }
}

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn pf(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>().map_err(|_| format!("expected a number, got `{v}`"))
}

fn pu<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn plist<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| pu(x.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_idempotent() {
        let mut c = RunConfig::paper(3);
        c.model.loss.q = 0.1 + 0.2;
        c.model.regularization = Regularization::Absolute(1e-9);
        c.train.report_at = Some(70000);
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn errors_name_line_and_field() {
        let e = RunConfig::parse("# c\nq = 0.5\nbeta1 = abc\n").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("beta1"), "{e}");
        let e = RunConfig::parse("nonsense = 1").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("nonsense"), "{e}");
        let e = RunConfig::parse("just words").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
    }

    #[test]
    fn defaults_validate() {
        RunConfig::paper(2).validate().unwrap();
    }
}
