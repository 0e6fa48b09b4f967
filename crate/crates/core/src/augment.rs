//! Training-time augmentation: additive white Gaussian noise on waveforms and
//! SpecAugment-style band masking on log-Mel spectrograms.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{LogMelSpectrogram, Waveform};
use crate::error::{arg_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Master switch; when false no augmentation runs at all.
    pub enabled: bool,
    pub awgn_enabled: bool,
    pub snr_db_range: [f64; 2],
    pub spec_augment_enabled: bool,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    /// Chance that a given training sample is augmented in a given epoch.
    pub apply_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            awgn_enabled: true,
            snr_db_range: [15.0, 30.0],
            spec_augment_enabled: true,
            n_freq_masks: 2,
            max_freq_width: 16,
            n_time_masks: 2,
            max_time_width: 20,
            apply_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(arg_err(
                "augment config",
                format!("snr range [{lo}, {hi}] is not an ordered finite pair"),
            ));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(arg_err(
                "augment config",
                format!(
                    "apply_probability {} outside [0, 1]",
                    self.apply_probability
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Awgn {
    Applied(Waveform),
    /// The input had zero power, so no SNR can be met; returned unchanged.
    SilentInput(Waveform),
}

impl Awgn {
    pub fn into_waveform(self) -> Waveform {
        match self {
            Awgn::Applied(w) | Awgn::SilentInput(w) => w,
        }
    }
}

/// Adds zero-mean Gaussian noise with variance `P_signal / 10^(snr_db / 10)`.
pub fn awgn<R: Rng + ?Sized>(w: &Waveform, snr_db: f64, rng: &mut R) -> Result<Awgn> {
    if !snr_db.is_finite() {
        return Err(arg_err("awgn", format!("snr {snr_db} dB is not finite")));
    }
    let power = w.power();
    if power == 0.0 {
        return Ok(Awgn::SilentInput(w.clone()));
    }
    let sigma = libm::sqrt(power / libm::pow(10.0, snr_db / 10.0));
    let normal = Normal::new(0.0, sigma).map_err(|e| arg_err("awgn", format!("{e}")))?;
    let samples = w.samples.iter().map(|&x| x + normal.sample(rng)).collect();
    Ok(Awgn::Applied(Waveform::new(samples, w.sample_rate)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Mel,
    Time,
}

/// A masked band `[start, start + width)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Masks `n_freq_masks` mel bands and `n_time_masks` frame bands, filling
/// masked cells with the spectrogram's minimum value. Widths are uniform in
/// `[0, max_width]` (time widths also capped by the frame count).
pub fn spec_augment<R: Rng + ?Sized>(
    s: &LogMelSpectrogram,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (LogMelSpectrogram, Vec<Mask>) {
    let mut out = s.clone();
    let (n_mels, frames) = (s.n_mels(), s.frames());
    let fill = s.min();
    let mut masks = Vec::with_capacity(cfg.n_freq_masks + cfg.n_time_masks);
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width).min(n_mels);
        let start = rng.random_range(0..=n_mels - width);
        masks.push(Mask {
            axis: MaskAxis::Mel,
            start,
            width,
        });
    }
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=cfg.max_time_width.min(frames));
        let start = rng.random_range(0..=frames - width);
        masks.push(Mask {
            axis: MaskAxis::Time,
            start,
            width,
        });
    }
    let values = out.values_mut();
    for m in &masks {
        match m.axis {
            MaskAxis::Mel => values[m.start * frames..(m.start + m.width) * frames].fill(fill),
            MaskAxis::Time => {
                for row in values.chunks_mut(frames.max(1)) {
                    row[m.start..m.start + m.width].fill(fill);
                }
            }
        }
    }
    (out, masks)
}
