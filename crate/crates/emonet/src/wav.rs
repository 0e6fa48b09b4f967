//! RIFF/WAVE reading (PCM 16-bit or IEEE float 32-bit, mono or stereo) and
//! 16-bit PCM writing.

use std::path::Path;

use emonet_core::dsp::Waveform;

use crate::error::{Error, Result};

const PCM: u16 = 1;
const IEEE_FLOAT: u16 = 3;
const EXTENSIBLE: u16 = 0xfffe;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WavError {
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("unsupported codec: format tag {format}, {bits} bits, {channels} channel(s)")]
    Unsupported {
        format: u16,
        bits: u16,
        channels: u16,
    },
}

fn malformed(msg: impl Into<String>) -> WavError {
    WavError::Malformed(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a WAV byte stream; stereo is averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("not a RIFF/WAVE stream"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(len).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| malformed("fmt chunk runs past end of file"))?;
                if len < 16 {
                    return Err(malformed(format!("fmt chunk of {len} bytes")));
                }
                let mut format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format == EXTENSIBLE {
                    if len < 40 || end < body + 26 {
                        return Err(malformed("extensible fmt chunk too short"));
                    }
                    format = u16_at(bytes, body + 24);
                }
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                let end = end.ok_or_else(|| malformed("data chunk runs past end of file"))?;
                return samples(&bytes[body..end], format, channels, rate, bits);
            }
            _ => {}
        }
        pos = body.saturating_add(len).saturating_add(len & 1);
    }
    Err(malformed(if fmt.is_some() {
        "no data chunk"
    } else {
        "no fmt chunk"
    }))
}

fn samples(
    data: &[u8],
    format: u16,
    channels: u16,
    rate: u32,
    bits: u16,
) -> Result<Waveform, WavError> {
    let unsupported = WavError::Unsupported {
        format,
        bits,
        channels,
    };
    let width = match (format, bits) {
        (PCM, 16) => 2,
        (IEEE_FLOAT, 32) => 4,
        _ => return Err(unsupported),
    };
    if !(1..=2).contains(&channels) {
        return Err(unsupported);
    }
    if rate == 0 {
        return Err(malformed("sample rate 0"));
    }
    let frame = width * channels as usize;
    if !data.len().is_multiple_of(frame) {
        return Err(malformed(format!(
            "data length {} is not a multiple of the frame size {frame}",
            data.len()
        )));
    }
    let value = |c: &[u8]| match width {
        2 => i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0,
        _ => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
    };
    let out = data
        .chunks_exact(frame)
        .map(|f| f.chunks_exact(width).map(value).sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform::new(out, rate))
}

pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|source| Error::Wav {
        path: path.into(),
        source,
    })
}

/// Mono 16-bit PCM; samples are scaled by 32768, rounded and clipped.
pub fn encode_wav_pcm16(w: &Waveform) -> Vec<u8> {
    let data_len = 2 * w.samples.len() as u32;
    let mut b = Vec::with_capacity(44 + data_len as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&PCM.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&w.sample_rate.to_le_bytes());
    b.extend_from_slice(&(2 * w.sample_rate).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

/// Float 32-bit PCM with `channels` interleaved copies of each sample.
pub fn encode_wav_f32(w: &Waveform, channels: u16) -> Vec<u8> {
    let data_len = 4 * channels as u32 * w.samples.len() as u32;
    let mut b = Vec::with_capacity(44 + data_len as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&IEEE_FLOAT.to_le_bytes());
    b.extend_from_slice(&channels.to_le_bytes());
    b.extend_from_slice(&w.sample_rate.to_le_bytes());
    b.extend_from_slice(&(4 * channels as u32 * w.sample_rate).to_le_bytes());
    b.extend_from_slice(&(4 * channels).to_le_bytes());
    b.extend_from_slice(&32u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        for _ in 0..channels {
            b.extend_from_slice(&(s as f32).to_le_bytes());
        }
    }
    b
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    std::fs::write(path, encode_wav_pcm16(w)).map_err(|e| Error::io(path, e))
}
