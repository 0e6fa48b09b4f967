//! Binary formats: model weights ("AEN1") and cached features ("AEF1").
//! Both are little-endian and end in a CRC32 of every preceding byte.
//!
//! Weights: magic, u16 version, u32 tensor count, then per tensor a u16 name
//! length, UTF-8 name, u8 rank, u32 dims and f64 values.
//!
//! Features: magic, u16 version, u32 n_mels, u32 frames, f32 values in
//! mel-major order.

use std::path::Path;

use emonet_core::dsp::LogMelSpectrogram;
use emonet_core::model::{EmotionNet, ModelConfig};
use emonet_core::Tensor;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AEN1";
pub const FEATURES_MAGIC: &[u8; 4] = b"AEF1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported version {0}, expected {VERSION}")]
    Version(u16),
    #[error("truncated: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing byte(s) after payload")]
    Trailing(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
}

fn crc(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn seal(mut b: Vec<u8>) -> Vec<u8> {
    let c = crc(&b);
    b.extend_from_slice(&c.to_le_bytes());
    b
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.b.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.b.len() - self.pos),
            });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Checks magic and version, parses the body with `parse`, then verifies the
/// CRC trailer. A body that runs out of bytes is reported as truncation even
/// though its checksum also fails.
fn read_sealed<T>(
    bytes: &[u8],
    magic: &[u8; 4],
    parse: impl FnOnce(&mut Reader<'_>) -> Result<T, FormatError>,
) -> Result<T, FormatError> {
    let mut r = Reader { b: bytes, pos: 0 };
    let m = r.take(4)?;
    if m != magic {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(magic).into(),
            found: String::from_utf8_lossy(m).into(),
        });
    }
    let v = r.u16()?;
    if v != VERSION {
        return Err(FormatError::Version(v));
    }
    let body = bytes.len().saturating_sub(4).max(6);
    let mut body_reader = Reader {
        b: &bytes[..body.min(bytes.len())],
        pos: 6,
    };
    let parsed = parse(&mut body_reader).and_then(|t| match body - body_reader.pos {
        0 => Ok(t),
        extra => Err(FormatError::Trailing(extra)),
    });
    if bytes.len() < 10 {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: 10 - bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc(&bytes[..body]);
    match parsed {
        Err(e @ FormatError::Truncated { .. }) => Err(e),
        _ if stored != computed => Err(FormatError::Checksum { stored, computed }),
        other => other,
    }
}

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>, FormatError> {
    let mut b = Vec::new();
    b.extend_from_slice(WEIGHTS_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| FormatError::Invalid(format!("name {name} too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| FormatError::Invalid(format!("{name}: rank {} too large", t.rank())))?;
        b.extend_from_slice(&name_len.to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| FormatError::Invalid(format!("{name}: dim {d} too large")))?;
            b.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(seal(b))
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    read_sealed(bytes, WEIGHTS_MAGIC, |r| {
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FormatError::Invalid(format!("{name}: shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| FormatError::Invalid(format!("{name}: shape overflows")))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
            out.push((name, t));
        }
        Ok(out)
    })
}

pub fn save_weights(model: &EmotionNet, path: &Path) -> Result<()> {
    let bytes = encode_tensors(&model.named_tensors()).map_err(|source| Error::Format {
        path: path.into(),
        source,
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads weights saved by [`save_weights`]; names and shapes must match
/// `cfg` exactly.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<EmotionNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode_tensors(&bytes).map_err(|source| Error::Format {
        path: path.into(),
        source,
    })?;
    Ok(EmotionNet::from_named_tensors(cfg, tensors)?)
}

/// Values are stored as f32.
pub fn encode_features(s: &LogMelSpectrogram) -> Vec<u8> {
    let mut b = Vec::with_capacity(18 + 4 * s.values().len());
    b.extend_from_slice(FEATURES_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(s.n_mels() as u32).to_le_bytes());
    b.extend_from_slice(&(s.frames() as u32).to_le_bytes());
    for &v in s.values() {
        b.extend_from_slice(&(v as f32).to_le_bytes());
    }
    seal(b)
}

pub fn decode_features(
    bytes: &[u8],
    sample_rate: u32,
    hop: usize,
) -> Result<LogMelSpectrogram, FormatError> {
    read_sealed(bytes, FEATURES_MAGIC, |r| {
        let n_mels = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let n = n_mels
            .checked_mul(frames)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Invalid("dimensions overflow".into()))?;
        let values = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        LogMelSpectrogram::new(n_mels, frames, values, sample_rate, hop)
            .map_err(|e| FormatError::Invalid(e.to_string()))
    })
}

/// `s` with every value rounded through f32, i.e. what a cache round trip
/// yields.
pub fn quantize_features(s: &LogMelSpectrogram) -> LogMelSpectrogram {
    let mut q = s.clone();
    q.values_mut()
        .iter_mut()
        .for_each(|v| *v = *v as f32 as f64);
    q
}
