//! Run configuration as a flat JSON object of dotted keys, e.g.
//! `{"model.kernel_size": 5, "train.lr": 0.001}`. Keys not listed in
//! [`RunConfig::default`] are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use emonet_core::augment::AugmentConfig;
use emonet_core::dsp::MelConfig;
use emonet_core::model::ModelConfig;
use emonet_core::synth::SynthConfig;
use emonet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<String>,
    pub synthetic: bool,
    pub cache: Option<String>,
    /// Fixed label vocabulary; see [`crate::datasets::label_preset`].
    pub label_preset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub mel: MelConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                manifest: None,
                synthetic: false,
                cache: None,
                label_preset: None,
            },
            mel: MelConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig { k: 5 },
            synth: SynthConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_owned(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_owned(), v.clone());
            } else {
                node = node
                    .entry(part.to_owned())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys come from a flattened tree");
            }
        }
    }
    Value::Object(root)
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        out
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        serde_json::from_value(unflatten(flat)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `overrides` on top of `self`, rejecting unknown keys.
    pub fn with_overrides<'a, I: IntoIterator<Item = (&'a str, Value)>>(
        &self,
        overrides: I,
    ) -> Result<Self> {
        let mut flat = self.to_flat();
        for (key, v) in overrides {
            match flat.get_mut(key) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        Self::from_flat(&flat)
    }

    /// Defaults overridden by the flat JSON object in `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(m) = v else {
            return Err(Error::Config(
                "config must be a JSON object of dotted keys".into(),
            ));
        };
        if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object()) {
            return Err(Error::Config(format!(
                "key {k:?}: nested objects are not allowed, use dotted keys"
            )));
        }
        Self::default().with_overrides(m.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// Pretty JSON of [`Self::to_flat`], keys sorted.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat()).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: emonet_core::Error| Error::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.augment.validate().map_err(cfg)?;
        self.synth.validate().map_err(cfg)?;
        if self.model.n_mels != self.mel.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels ({}) must equal mel.n_mels ({})",
                self.model.n_mels, self.mel.n_mels
            )));
        }
        if self.eval.k < 2 {
            return Err(Error::Config(format!(
                "eval.k = {}, need at least 2",
                self.eval.k
            )));
        }
        Ok(())
    }
}

/// Parses `key=value`; the value is read as JSON when it parses, otherwise
/// as a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.trim().to_owned(), value))
}
