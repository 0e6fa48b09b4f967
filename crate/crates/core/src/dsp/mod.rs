//! Log-Mel spectrogram extraction.
//!
//! Frames are centered (the signal is reflect-padded by `n_fft / 2` on both
//! ends), windowed with a periodic Hann window and transformed to a power
//! spectrum. A Slaney-style, area-normalized triangular filterbank maps the
//! spectrum to Mel bands, and the result is converted to decibels relative
//! to the global maximum with an 80 dB floor.

mod fft;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use fft::Fft;

use crate::autodiff::linalg::gemm;
use crate::error::{arg_err, Error, Result};

pub const AMIN: f64 = 1e-10;
pub const TOP_DB: f64 = 80.0;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean power `sum(x^2) / N`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 256,
            n_mels: 128,
            f_min: 80.0,
            f_max: 7600.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return Err(arg_err(
                "mel config",
                format!("n_fft {} is not a power of two >= 2", self.n_fft),
            ));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(arg_err(
                "mel config",
                format!("hop {} outside 1..={}", self.hop, self.n_fft),
            ));
        }
        if self.n_mels == 0 {
            return Err(arg_err("mel config", "n_mels must be positive"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(arg_err(
                "mel config",
                format!(
                    "need 0 <= f_min < f_max, got {} and {}",
                    self.f_min, self.f_max
                ),
            ));
        }
        if self.f_max > nyquist {
            return Err(arg_err(
                "mel config",
                format!("f_max {} exceeds Nyquist {nyquist}", self.f_max),
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor(len / hop) + 1` centered frames.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// `[n_mels x frames]` row-major matrix of dB values.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    values: Vec<f64>,
    n_mels: usize,
    frames: usize,
    pub sample_rate: u32,
    pub hop: usize,
}

impl LogMelSpectrogram {
    pub fn new(
        n_mels: usize,
        frames: usize,
        values: Vec<f64>,
        sample_rate: u32,
        hop: usize,
    ) -> Result<Self> {
        if values.len() != n_mels * frames {
            return Err(Error::Shape {
                op: "LogMelSpectrogram::new",
                detail: format!("{} values for {n_mels} x {frames}", values.len()),
            });
        }
        Ok(Self {
            values,
            n_mels,
            frames,
            sample_rate,
            hop,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.frames + frame]
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-band mean over frames.
    pub fn band_means(&self) -> Vec<f64> {
        self.values
            .chunks(self.frames.max(1))
            .map(|row| row.iter().sum::<f64>() / self.frames.max(1) as f64)
            .collect()
    }
}

// 200/3 Hz per mel below the breakpoint; written as *3/200 so that the
// breakpoint lands exactly on 15 mel.
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = 15.0;

fn log_step() -> f64 {
    libm::log(6.4) / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz * 3.0 / 200.0
    } else {
        MIN_LOG_MEL + libm::log(hz / MIN_LOG_HZ) / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * 200.0 / 3.0
    } else {
        MIN_LOG_HZ * libm::exp(log_step() * (mel - MIN_LOG_MEL))
    }
}

/// The `n_mels + 2` band edges, equally spaced in mel between `f_min` and
/// `f_max`. Filter `m` peaks at edge `m + 1`.
pub fn mel_band_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Peak frequency of every filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let edges = mel_band_edges(cfg);
    edges[1..edges.len() - 1].to_vec()
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - libm::cos(2.0 * PI * i as f64 / n as f64)))
        .collect()
}

/// `[n_mels x (n_fft/2 + 1)]` triangular filters, each scaled by
/// `2 / (f_upper - f_lower)`.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Result<Vec<f64>> {
    cfg.validate(sample_rate)?;
    let nb = cfg.n_bins();
    let bin_hz: Vec<f64> = (0..nb)
        .map(|k| k as f64 * sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    let edges = mel_band_edges(cfg);
    let mut fb = vec![0.0; cfg.n_mels * nb];
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            fb[m * nb + k] = rising.min(falling).max(0.0) * norm;
        }
    }
    Ok(fb)
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// `[frames x (n_fft/2 + 1)]` power spectrogram `|FFT|^2`.
pub fn stft_power(w: &Waveform, cfg: &MelConfig) -> Result<Vec<f64>> {
    if w.samples.is_empty() {
        return Err(Error::Empty("stft_power"));
    }
    cfg.validate(w.sample_rate)?;
    let n = cfg.n_fft;
    let nb = cfg.n_bins();
    let frames = cfg.frames_for(w.samples.len());
    let window = hann_window(n);
    let fft = Fft::new(n);
    let pad = (n / 2) as isize;
    let len = w.samples.len();
    let mut out = vec![0.0; frames * nb];
    let (mut re, mut im) = (vec![0.0; n], vec![0.0; n]);
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - pad;
        for j in 0..n {
            re[j] = w.samples[reflect_index(start + j as isize, len)] * window[j];
        }
        im.fill(0.0);
        fft.forward(&mut re, &mut im);
        for (k, o) in out[t * nb..][..nb].iter_mut().enumerate() {
            *o = re[k] * re[k] + im[k] * im[k];
        }
    }
    Ok(out)
}

/// `10 log10(max(x, amin) / max(ref, amin))` with `ref` the global maximum,
/// floored at `max_db - 80`.
pub fn power_to_db(power: &[f64]) -> Vec<f64> {
    let reference = power.iter().copied().fold(0.0, f64::max).max(AMIN);
    let ref_db = 10.0 * libm::log10(reference);
    let mut db: Vec<f64> = power
        .iter()
        .map(|&x| 10.0 * libm::log10(x.max(AMIN)) - ref_db)
        .collect();
    let top = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut db {
        *v = v.max(top - TOP_DB);
    }
    db
}

/// Mel-band power `[n_mels x frames]` before the dB conversion.
pub fn mel_power(w: &Waveform, cfg: &MelConfig) -> Result<Vec<f64>> {
    let power = stft_power(w, cfg)?;
    let fb = mel_filterbank(cfg, w.sample_rate)?;
    let frames = cfg.frames_for(w.samples.len());
    let mut mel = vec![0.0; cfg.n_mels * frames];
    gemm(
        cfg.n_mels,
        cfg.n_bins(),
        frames,
        &fb,
        false,
        &power,
        true,
        0.0,
        &mut mel,
    );
    Ok(mel)
}

pub fn melspectrogram(w: &Waveform, cfg: &MelConfig) -> Result<LogMelSpectrogram> {
    let mel = mel_power(w, cfg)?;
    let frames = cfg.frames_for(w.samples.len());
    LogMelSpectrogram::new(
        cfg.n_mels,
        frames,
        power_to_db(&mel),
        w.sample_rate,
        cfg.hop,
    )
}
