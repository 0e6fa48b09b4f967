//! Manifest ingestion, label vocabularies and the on-disk feature cache.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use emonet_core::dsp::{melspectrogram, LogMelSpectrogram, MelConfig};
use emonet_core::train::Example;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{decode_features, encode_features, quantize_features};
use crate::wav::decode_wav;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub label: String,
    pub speaker: Option<String>,
}

/// Sorted label vocabulary; a label's id is its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap(Vec<String>);

impl LabelMap {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        let set: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        Self(set.into_iter().collect())
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.0.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fixed vocabularies for the two Arabic emotion corpora. Which phase of the
/// first corpus a given experiment used is not known, so all variants are
/// offered.
pub fn label_preset(name: &str) -> Option<LabelMap> {
    let labels: &[&str] = match name {
        "ksu-phase1" => &["happiness", "neutral", "questioning", "sadness", "surprise"],
        "ksu-phase2" => &["anger", "happiness", "neutral", "sadness", "surprise"],
        "ksu-union" => &[
            "anger",
            "happiness",
            "neutral",
            "questioning",
            "sadness",
            "surprise",
        ],
        "kedas" => &["anger", "fear", "happiness", "neutrality", "sadness"],
        _ => return None,
    };
    Some(LabelMap::new(labels.iter().copied()))
}

pub const LABEL_PRESETS: [&str; 4] = ["ksu-phase1", "ksu-phase2", "ksu-union", "kedas"];

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.into(),
        detail: detail.into(),
    }
}

/// Reads a CSV manifest with columns `path` and `label` (and optionally
/// `speaker`) located by header name.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| manifest_err(path, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(manifest_err(path, "empty file"));
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(pc), Some(lc)) = (col("path"), col("label")) else {
        return Err(manifest_err(
            path,
            format!(
                "header must contain \"path\" and \"label\", found {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        ));
    };
    let sc = col("speaker");
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| manifest_err(path, e.to_string()))?;
        let row = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let (p, label) = (field(pc), field(lc));
        if p.is_empty() || label.is_empty() {
            return Err(manifest_err(
                path,
                format!("row {row}: empty path or label"),
            ));
        }
        if !seen.insert(p.to_owned()) {
            return Err(manifest_err(
                path,
                format!("duplicate path {p} (row {row})"),
            ));
        }
        let speaker = sc.map(field).filter(|s| !s.is_empty()).map(str::to_owned);
        out.push(ManifestEntry {
            path: base.join(p),
            label: label.to_owned(),
            speaker,
        });
    }
    if out.is_empty() {
        return Err(manifest_err(path, "no entries"));
    }
    Ok(out)
}

/// Vocabulary of `entries`, or `preset` when given (in which case every
/// label must belong to it).
pub fn label_map(entries: &[ManifestEntry], preset: Option<&str>) -> Result<LabelMap> {
    let found = LabelMap::new(entries.iter().map(|e| e.label.as_str()));
    let Some(name) = preset else { return Ok(found) };
    let map = label_preset(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown label preset {name:?}; known: {LABEL_PRESETS:?}"
        ))
    })?;
    if let Some(bad) = found.names().iter().find(|l| map.id(l).is_none()) {
        return Err(Error::Config(format!(
            "label {bad:?} is not in preset {name}"
        )));
    }
    Ok(map)
}

/// Counters from one [`build_features`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub hits: usize,
    /// Spectrograms computed from audio.
    pub computed: usize,
    pub frames: usize,
}

const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct CacheIndex {
    /// Content key to source path.
    entries: BTreeMap<String, String>,
}

/// Key for one utterance: SHA-256 over the audio bytes and the feature
/// configuration.
pub fn cache_key(audio: &[u8], mel: &MelConfig) -> String {
    let mut h = Sha256::new();
    h.update(audio);
    h.update(serde_json::to_vec(mel).expect("config serializes"));
    hex::encode(h.finalize())
}

enum Built {
    Hit(LogMelSpectrogram),
    Computed(LogMelSpectrogram, Vec<u8>),
}

/// Decodes and featurizes every entry, reading from and filling the cache in
/// `cache_dir` when given. Returned features are rounded through f32 whether
/// they came from the cache or not, so cold and warm runs agree bit for bit.
pub fn build_features(
    entries: &[ManifestEntry],
    labels: &LabelMap,
    mel: &MelConfig,
    cache_dir: Option<&Path>,
) -> Result<(Vec<Example>, BuildStats)> {
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let results: Vec<std::result::Result<(Example, Built, String), String>> = entries
        .par_iter()
        .map(|e| {
            let label = labels
                .id(&e.label)
                .ok_or_else(|| format!("label {:?} not in vocabulary", e.label))?;
            let bytes = std::fs::read(&e.path).map_err(|err| err.to_string())?;
            let wave = decode_wav(&bytes).map_err(|err| err.to_string())?;
            mel.validate(wave.sample_rate)
                .map_err(|err| err.to_string())?;
            let key = cache_key(&bytes, mel);
            let cached = cache_dir
                .map(|d| d.join(format!("{key}.aef")))
                .and_then(|p| std::fs::read(p).ok())
                .and_then(|b| decode_features(&b, wave.sample_rate, mel.hop).ok());
            let built = match cached {
                Some(f) => Built::Hit(f),
                None => {
                    let f = quantize_features(
                        &melspectrogram(&wave, mel).map_err(|err| err.to_string())?,
                    );
                    let bytes = encode_features(&f);
                    Built::Computed(f, bytes)
                }
            };
            let features = match &built {
                Built::Hit(f) | Built::Computed(f, _) => f.clone(),
            };
            Ok((
                Example {
                    features,
                    waveform: Some(wave),
                    label,
                },
                built,
                key,
            ))
        })
        .collect();

    let mut failures = Vec::new();
    let mut examples = Vec::with_capacity(entries.len());
    let mut stats = BuildStats::default();
    let mut new_entries = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok((ex, built, key)) => {
                stats.frames += ex.features.frames();
                match built {
                    Built::Hit(_) => stats.hits += 1,
                    Built::Computed(_, bytes) => {
                        stats.computed += 1;
                        new_entries.push((key, e.path.display().to_string(), bytes));
                    }
                }
                examples.push(ex);
            }
            Err(msg) => failures.push((e.path.clone(), msg)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Features(failures));
    }
    if let Some(dir) = cache_dir {
        let index_path = dir.join(INDEX_FILE);
        let mut index: CacheIndex = std::fs::read(&index_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        for (key, source, bytes) in new_entries {
            let p = dir.join(format!("{key}.aef"));
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            index.entries.insert(key, source);
        }
        let json = serde_json::to_vec_pretty(&index).expect("index serializes");
        std::fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    }
    Ok((examples, stats))
}

/// Featurizes in-memory waveforms without caching; values are rounded
/// through f32 exactly as [`build_features`] does.
pub fn featurize(
    waves: Vec<(emonet_core::dsp::Waveform, usize)>,
    mel: &MelConfig,
) -> Result<Vec<Example>> {
    waves
        .into_par_iter()
        .map(|(w, label)| {
            let features = quantize_features(&melspectrogram(&w, mel)?);
            Ok(Example {
                features,
                waveform: Some(w),
                label,
            })
        })
        .collect()
}
