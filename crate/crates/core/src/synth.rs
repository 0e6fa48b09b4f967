//! Synthetic corpus of amplitude-modulated tones, one carrier and modulation
//! rate per class. Classes occupy different mel bands, so the task is
//! solvable by construction.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{arg_err, Result};
use crate::rng::{self, tag};

pub const DITHER_SIGMA: f64 = 0.01;
const AMPLITUDE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: alloc::string::String,
    pub carrier_hz: f64,
    pub am_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub classes: Vec<ClassSpec>,
    pub sample_rate: u32,
    /// Seconds, `[min, max]`.
    pub duration_range: [f64; 2],
    /// Set by the caller from the run seed; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let spec = |name: &str, carrier_hz, am_hz| ClassSpec {
            name: name.into(),
            carrier_hz,
            am_hz,
        };
        Self {
            n_per_class: 20,
            classes: alloc::vec![
                spec("low", 300.0, 2.0),
                spec("mid", 1200.0, 8.0),
                spec("high", 3000.0, 4.0)
            ],
            sample_rate: 16_000,
            duration_range: [0.5, 1.5],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(arg_err("synth config", "need at least two classes"));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if !(a.carrier_hz > 0.0
                && a.carrier_hz < self.sample_rate as f64 / 2.0
                && a.am_hz >= 0.0)
            {
                return Err(arg_err(
                    "synth config",
                    format!("class {}: carrier must lie in (0, nyquist)", a.name),
                ));
            }
            if let Some(b) = self.classes[..i]
                .iter()
                .find(|b| (b.carrier_hz, b.am_hz) == (a.carrier_hz, a.am_hz))
            {
                return Err(arg_err(
                    "synth config",
                    format!("classes {} and {} share a spec", b.name, a.name),
                ));
            }
            if self.classes[..i].iter().any(|b| b.name == a.name) {
                return Err(arg_err(
                    "synth config",
                    format!("duplicate class name {}", a.name),
                ));
            }
        }
        let [lo, hi] = self.duration_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(arg_err(
                "synth config",
                format!("duration range [{lo}, {hi}] invalid"),
            ));
        }
        if self.n_per_class == 0 || self.sample_rate == 0 {
            return Err(arg_err(
                "synth config",
                "n_per_class and sample_rate must be positive",
            ));
        }
        Ok(())
    }
}

/// `n_per_class` samples per class, class-major. Each sample is
/// `A * sin(2 pi f t + phi) * (1 + 0.5 sin(2 pi m t + psi))` plus Gaussian
/// dither, with a random duration and random phases.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<(Waveform, usize)>> {
    cfg.validate()?;
    let sr = cfg.sample_rate as f64;
    let dither = Normal::new(0.0, DITHER_SIGMA).expect("constant sigma is valid");
    let mut out = Vec::with_capacity(cfg.n_per_class * cfg.classes.len());
    for (c, spec) in cfg.classes.iter().enumerate() {
        for i in 0..cfg.n_per_class {
            let mut r = rng::stream(cfg.seed, &[tag::SYNTH, c as u64, i as u64]);
            let [lo, hi] = cfg.duration_range;
            let secs = if hi > lo { r.random_range(lo..=hi) } else { lo };
            let n = libm::round(secs * sr) as usize;
            let phi = r.random_range(0.0..core::f64::consts::TAU);
            let psi = r.random_range(0.0..core::f64::consts::TAU);
            let samples = (0..n)
                .map(|j| {
                    let t = j as f64 / sr;
                    let carrier = libm::sin(core::f64::consts::TAU * spec.carrier_hz * t + phi);
                    let env = 1.0 + 0.5 * libm::sin(core::f64::consts::TAU * spec.am_hz * t + psi);
                    AMPLITUDE * carrier * env + dither.sample(&mut r)
                })
                .collect();
            out.push((Waveform::new(samples, cfg.sample_rate), c));
        }
    }
    Ok(out)
}
