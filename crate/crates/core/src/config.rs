//! Flat `key = value` run configuration and the manifest written next to every artifact.
//!
//! Keys carry a section prefix (`vit.`, `aug.`, `train.`, `probe.`) followed by
//! a field path, e.g. `train.base_lr = 2e-4` or `aug.channels.sar = [12, 14]`.
//! Values are parsed as JSON when possible and as bare strings otherwise.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::nn::ViTConfig;
use crate::trainer::TrainConfig;

pub const SECTIONS: [&str; 4] = ["vit", "aug", "train", "probe"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub vit: ViTConfig,
    pub aug: AugConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

impl Settings {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("settings serialize")
    }

    /// Override one field addressed by a dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let section = key.split('.').next().unwrap_or("");
        if !SECTIONS.contains(&section) || !key.contains('.') {
            return Err(Error::Config(format!(
                "unknown key {key:?}: keys start with one of {}",
                SECTIONS.map(|s| format!("{s}.")).join(", ")
            )));
        }
        let mut root = self.to_json();
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?,
                _ => return Err(Error::Config(format!("key {key:?} goes below a scalar field"))),
            };
        }
        *slot = parse_value(value);
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            for (k, v) in parse_kv(&text)? {
                s.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.aug.validate()?;
        self.train.validate()?;
        self.probe.validate()
    }

    /// Every leaf as `section.field -> value`.
    pub fn resolved(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &self.to_json(), &mut out);
        out
    }

    /// The resolved map in the file format, one key per line.
    pub fn to_kv_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What a command read and wrote, enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub config: BTreeMap<String, Value>,
    pub seed: u64,
    pub output_dir: String,
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config_path: Option<&Path>, seed: u64, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            args,
            config_path: config_path.map(|p| p.display().to_string()),
            config: BTreeMap::new(),
            seed,
            output_dir: out.display().to_string(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hash a file that was just written and record it under its file name.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.artifacts.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
