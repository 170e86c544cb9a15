//! `DMMC` checkpoint container.
//!
//! Layout (little-endian): magic `DMMC` | u16 version | u32 meta length |
//! meta JSON | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
//! u32 per dim, f64 values | CRC32 of everything before it.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig};
use crate::augment::AugConfig;
use crate::dino::{Center, DinoState};
use crate::error::{Error, Result};
use crate::nn::{ParameterSet, ViTConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMMC";
pub const VERSION: u16 = 1;

/// Configs that define a run; their hash guards resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigs {
    pub vit: ViTConfig,
    pub aug: AugConfig,
    pub train: TrainConfig,
    /// Training-set size; it fixes the step schedule.
    pub n_samples: usize,
}

impl RunConfigs {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("configs serialize")
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_json()).expect("configs serialize");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `key: old -> new` lines for every differing leaf.
    pub fn diff(&self, other: &RunConfigs) -> Vec<String> {
        let (a, b) = (flatten(&self.to_json()), flatten(&other.to_json()));
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                let show = |v: Option<&Value>| v.map_or("<absent>".to_string(), Value::to_string);
                format!("{k}: {} -> {}", show(a.get(k)), show(b.get(k)))
            })
            .collect()
    }
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub configs: RunConfigs,
    pub state: DinoState,
    pub adam: AdamState,
    /// Optimizer steps completed.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    configs: RunConfigs,
    config_hash: String,
    step: u64,
    adam_t: u64,
    center_momentum: f64,
}

impl Checkpoint {
    /// Refuse to resume under configs that differ from the saved ones.
    pub fn check_configs(&self, configs: &RunConfigs) -> Result<()> {
        if self.configs.hash() == configs.hash() {
            return Ok(());
        }
        Err(Error::Config(format!(
            "checkpoint was written under different configs:\n  {}",
            self.configs.diff(configs).join("\n  ")
        )))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            configs: self.configs.clone(),
            config_hash: self.configs.hash(),
            step: self.step,
            adam_t: self.adam.t,
            center_momentum: self.state.center.momentum,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, set) in [
            ("student", &self.state.student),
            ("teacher", &self.state.teacher),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ] {
            named.extend(set.iter().map(|(k, t)| (format!("{prefix}/{k}"), t)));
        }
        named.push(("center".into(), &self.state.center.c));

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.ndim() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 + 4 + 4 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let body_len = scan_body_len(bytes)?;
        match bytes.len().cmp(&(body_len + 4)) {
            std::cmp::Ordering::Less => return Err(Error::Format("truncated checkpoint".into())),
            std::cmp::Ordering::Greater => return Err(Error::Format("trailing bytes after checksum".into())),
            std::cmp::Ordering::Equal => {}
        }
        let (body, crc) = bytes.split_at(body_len);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(Error::Format("crc mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.config_hash != meta.configs.hash() {
            return Err(Error::Format("config hash does not match stored configs".into()));
        }
        let count = r.u32()? as usize;
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        let mut center = None;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(
                    n.checked_mul(8)
                        .ok_or_else(|| Error::Format("tensor too large".into()))?,
                )?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            match name.split_once('/') {
                Some((group, key)) => {
                    groups.entry(group.to_string()).or_default().insert(key.to_string(), t);
                }
                None if name == "center" => center = Some(t),
                None => return Err(Error::Format(format!("unexpected tensor {name}"))),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        let layout = ParameterSet::layout(&meta.configs.vit);
        let mut take = |g: &str| -> Result<ParameterSet> {
            let set = ParameterSet::from_map(groups.remove(g).unwrap_or_default());
            let ok = set.len() == layout.len()
                && layout
                    .iter()
                    .all(|(k, shape)| set.get(k).map(|t| t.shape() == shape.as_slice()).unwrap_or(false));
            if ok {
                Ok(set)
            } else {
                Err(Error::Format(format!(
                    "tensor group {g} does not match the stored network config"
                )))
            }
        };
        let student = take("student")?;
        let teacher = take("teacher")?;
        let adam = AdamState {
            m: take("adam_m")?,
            v: take("adam_v")?,
            t: meta.adam_t,
        };
        let center = center.ok_or_else(|| Error::Format("missing center".into()))?;
        Ok(Self {
            configs: meta.configs,
            state: DinoState {
                student,
                teacher,
                center: Center::new(center, meta.center_momentum)?,
            },
            adam,
            step: meta.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Walk the length fields to find where the checksum should start, so a
/// short file is reported as truncated rather than as a checksum failure.
fn scan_body_len(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader { buf: bytes, pos: 6 };
    let meta_len = r.u32()? as usize;
    r.take(meta_len)?;
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        r.take(name_len)?;
        let ndim = r.take(1)?[0] as usize;
        let mut n = 1usize;
        for _ in 0..ndim {
            n = n.saturating_mul(r.u32()? as usize);
        }
        r.take(n.saturating_mul(8))?;
    }
    Ok(r.pos)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            _ => Err(Error::Format("truncated checkpoint".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
