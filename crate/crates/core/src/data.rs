//! Synthetic paired optical/SAR scenes, the `DMM1` container, per-channel
//! standardization, and shuffled batching.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::ChannelSplit;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMM1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 * 2 + 4 + 2 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    /// `[C_optical + C_sar, H, W]`.
    pub pixels: Tensor,
    /// Multi-hot, one byte per class.
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub c_optical: usize,
    pub c_sar: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.c_optical + self.c_sar
    }

    pub fn channel_split(&self) -> ChannelSplit {
        ChannelSplit::new(self.c_optical, self.c_sar)
    }

    /// Errors unless `split` matches this dataset's optical/SAR layout.
    pub fn check_split(&self, split: &ChannelSplit) -> Result<()> {
        if *split != self.channel_split() {
            return Err(Error::Config(format!(
                "channel split {split:?} does not match dataset ({} optical + {} SAR)",
                self.c_optical, self.c_sar
            )));
        }
        Ok(())
    }

    /// Label matrix `[n, num_classes]` as 0/1 floats.
    pub fn label_matrix(&self) -> Tensor {
        let data = self
            .samples
            .iter()
            .flat_map(|s| s.labels.iter().map(|&l| f64::from(l)))
            .collect();
        Tensor::new(&[self.len(), self.num_classes], data).expect("labels have num_classes entries")
    }

    /// Split off the last `n_tail` samples.
    pub fn split_tail(mut self, n_tail: usize) -> Result<(Dataset, Dataset)> {
        if n_tail > self.len() {
            return Err(Error::Config(format!(
                "cannot split {n_tail} from {} samples",
                self.len()
            )));
        }
        let tail = self.samples.split_off(self.len() - n_tail);
        let rest = Dataset { samples: tail, ..self };
        Ok((self, rest))
    }

    /// Samples grouped into batches in the order of [`batch_indices`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<&MultimodalSample>>> {
        Ok(batch_indices(self.len(), batch_size, seed, epoch)?
            .into_iter()
            .map(|b| b.into_iter().map(|i| &self.samples[i]).collect())
            .collect())
    }
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, domain::SHUFFLE, epoch, 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Knobs of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub num_classes: usize,
    pub size: usize,
    pub c_optical: usize,
    pub c_sar: usize,
    pub seed: u64,
    /// Probability each class is present.
    pub label_prob: f64,
    /// Mean level of a class motif relative to its texture swing.
    pub motif_offset: f64,
    /// Std of the per-sample, per-channel background level.
    pub background_std: f64,
    pub optical_noise: f64,
    pub sar_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2500,
            num_classes: 8,
            size: 64,
            c_optical: 12,
            c_sar: 2,
            seed: 0,
            label_prob: 0.25,
            motif_offset: 0.5,
            background_std: 0.7,
            optical_noise: 0.3,
            sar_noise: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.n < self.num_classes {
            return Err(Error::Config(format!(
                "need n >= num_classes >= 1, got n={} classes={}",
                self.n, self.num_classes
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("image size {} below 16", self.size)));
        }
        if self.c_optical == 0 || self.c_sar == 0 {
            return Err(Error::Config("both modalities need at least one channel".into()));
        }
        if self.size > u16::MAX as usize || self.num_classes > u16::MAX as usize {
            return Err(Error::Config("size and class count must fit in u16".into()));
        }
        if !(self.label_prob > 0.0 && self.label_prob <= 1.0) {
            return Err(Error::Config(format!("label_prob {} not in (0, 1]", self.label_prob)));
        }
        for (name, v) in [
            ("background_std", self.background_std),
            ("optical_noise", self.optical_noise),
            ("sar_noise", self.sar_noise),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Spatial pattern of a class. Every kind is unchanged in distribution by a
/// horizontal flip, and its phase or position is drawn per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Pattern {
    Stripes { vertical: bool, cycles: f64 },
    Checker { cycles: f64 },
    Rings { cycles: f64 },
    Blobs { count: usize, radius: f64 },
}

impl Pattern {
    fn for_class(c: usize) -> Self {
        match c % 8 {
            0 => Pattern::Stripes {
                vertical: true,
                cycles: 2.0,
            },
            1 => Pattern::Stripes {
                vertical: false,
                cycles: 2.0,
            },
            2 => Pattern::Stripes {
                vertical: true,
                cycles: 5.0,
            },
            3 => Pattern::Stripes {
                vertical: false,
                cycles: 5.0,
            },
            4 => Pattern::Checker { cycles: 2.0 },
            5 => Pattern::Checker { cycles: 5.0 },
            6 => Pattern::Rings { cycles: 3.0 },
            _ => Pattern::Blobs { count: 4, radius: 0.08 },
        }
    }

    /// Roughly zero-mean, unit-amplitude field on an `s x s` grid.
    fn render(self, s: usize, rng: &mut impl Rng) -> Vec<f64> {
        let sf = s as f64;
        let mut phase = || rng.gen_range(0.0..2.0 * PI);
        let field: Box<dyn Fn(f64, f64) -> f64> = match self {
            Pattern::Stripes { vertical, cycles } => {
                let (k, p) = (2.0 * PI * cycles / sf, phase());
                Box::new(move |x, y| (k * if vertical { x } else { y } + p).cos())
            }
            Pattern::Checker { cycles } => {
                let (k, px, py) = (2.0 * PI * cycles / sf, phase(), phase());
                Box::new(move |x, y| 2.0 * (k * x + px).cos() * (k * y + py).cos())
            }
            Pattern::Rings { cycles } => {
                let k = 2.0 * PI * cycles / sf;
                let (cx, cy, p) = (
                    rng.gen_range(0.0..sf),
                    rng.gen_range(0.0..sf),
                    rng.gen_range(0.0..2.0 * PI),
                );
                Box::new(move |x, y| (k * ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() + p).cos())
            }
            Pattern::Blobs { count, radius } => {
                let r2 = 2.0 * (radius * sf).powi(2);
                let centres: Vec<(f64, f64)> = (0..count)
                    .map(|_| (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf)))
                    .collect();
                Box::new(move |x, y| {
                    let v: f64 = centres
                        .iter()
                        .map(|(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / r2).exp())
                        .sum();
                    3.0 * v - 0.5
                })
            }
        };
        (0..s * s).map(|i| field((i % s) as f64, (i / s) as f64)).collect()
    }
}

/// A class's spatial pattern and its optical and SAR signatures.
struct ClassMotif {
    pattern: Pattern,
    optical: Vec<f64>,
    sar: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn class_motifs(cfg: &SynthConfig) -> Vec<ClassMotif> {
    let mut rng = rng::stream(cfg.seed, domain::SYNTH, 0, 0);
    // Shared optical-to-SAR coupling, so SAR signatures correlate with optical ones.
    let coupling: Vec<f64> = (0..cfg.c_sar * cfg.c_optical)
        .map(|_| normal(&mut rng) / (cfg.c_optical as f64).sqrt())
        .collect();
    (0..cfg.num_classes)
        .map(|c| {
            let optical: Vec<f64> = (0..cfg.c_optical).map(|_| normal(&mut rng)).collect();
            let sar = (0..cfg.c_sar)
                .map(|j| {
                    let coupled: f64 = (0..cfg.c_optical)
                        .map(|k| coupling[j * cfg.c_optical + k] * optical[k])
                        .sum();
                    0.7 * coupled + 0.7 * normal(&mut rng)
                })
                .collect();
            ClassMotif {
                pattern: Pattern::for_class(c),
                optical,
                sar,
            }
        })
        .collect()
}

fn render_sample(cfg: &SynthConfig, motifs: &[ClassMotif], index: usize) -> MultimodalSample {
    let mut rng = rng::stream(cfg.seed, domain::SYNTH, 1, index as u64);
    let k = cfg.num_classes;
    let mut labels: Vec<u8> = (0..k).map(|_| u8::from(rng.gen::<f64>() < cfg.label_prob)).collect();
    if labels.iter().all(|&l| l == 0) {
        labels[rng.gen_range(0..k)] = 1;
    }
    let (s, c) = (cfg.size, cfg.c_optical + cfg.c_sar);
    let mut data = vec![0.0; c * s * s];
    // Per-channel background level.
    for ch in 0..c {
        let level = cfg.background_std * normal(&mut rng);
        data[ch * s * s..(ch + 1) * s * s].fill(level);
    }
    for (motif, _) in motifs.iter().zip(&labels).filter(|(_, &l)| l == 1) {
        let amp = rng.gen_range(0.6..1.4);
        let field = motif.pattern.render(s, &mut rng);
        for (ch, w) in motif.optical.iter().chain(&motif.sar).enumerate() {
            let plane = &mut data[ch * s * s..(ch + 1) * s * s];
            for (d, f) in plane.iter_mut().zip(&field) {
                *d += amp * w * (cfg.motif_offset + f);
            }
        }
    }
    for ch in 0..c {
        let sigma = if ch < cfg.c_optical {
            cfg.optical_noise
        } else {
            cfg.sar_noise
        };
        for v in &mut data[ch * s * s..(ch + 1) * s * s] {
            // Stored at f32 precision so the on-disk form round-trips exactly.
            *v = (*v + sigma * normal(&mut rng)) as f32 as f64;
        }
    }
    MultimodalSample {
        id: index as u64,
        pixels: Tensor::new(&[c, s, s], data).expect("sized above"),
        labels,
    }
}

/// Synthetic dataset with default noise levels.
pub fn generate_synthetic(n: usize, num_classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    generate(&SynthConfig {
        n,
        num_classes,
        size,
        seed,
        ..SynthConfig::default()
    })
}

/// Every active class adds its grating, weighted by the class signature, to
/// both modalities. Sample `i` depends only on `(cfg, i)`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let motifs = class_motifs(cfg);
    Ok(Dataset {
        num_classes: cfg.num_classes,
        c_optical: cfg.c_optical,
        c_sar: cfg.c_sar,
        height: cfg.size,
        width: cfg.size,
        samples: (0..cfg.n).map(|i| render_sample(cfg, &motifs, i)).collect(),
    })
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Input("cannot compute statistics of an empty dataset".into()));
        }
        let c = dataset.channels();
        let plane = dataset.height * dataset.width;
        let count = (dataset.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        for s in &dataset.samples {
            for (ch, p) in s.pixels.data().chunks(plane).enumerate() {
                mean[ch] += p.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for s in &dataset.samples {
            for (ch, p) in s.pixels.data().chunks(plane).enumerate() {
                var[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .iter()
            .enumerate()
            .map(|(ch, v)| {
                let sd = (v / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    log::warn!("channel {ch} has zero variance; using std 1");
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardize every sample in place with these statistics.
    pub fn apply(&self, dataset: &mut Dataset) -> Result<()> {
        if self.mean.len() != dataset.channels() || self.std.len() != dataset.channels() {
            return Err(Error::Shape(format!(
                "statistics for {} channels, dataset has {}",
                self.mean.len(),
                dataset.channels()
            )));
        }
        let plane = dataset.height * dataset.width;
        for s in &mut dataset.samples {
            for (ch, p) in s.pixels.data_mut().chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
            }
        }
        Ok(())
    }
}

/// Standardize with statistics computed from `dataset` itself.
pub fn normalize(mut dataset: Dataset) -> Result<(Dataset, ChannelStats)> {
    let stats = ChannelStats::compute(&dataset)?;
    stats.apply(&mut dataset)?;
    Ok((dataset, stats))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
}

/// Encode to the `DMM1` layout. Pixels are written as f32.
pub fn to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let (c, h, w) = (dataset.channels(), dataset.height, dataset.width);
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.len() * (8 + dataset.num_classes + 4 * c * h * w) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u16(dataset.num_classes, "num_classes")?.to_le_bytes());
    let n = u32::try_from(dataset.len()).map_err(|_| Error::Format("too many samples".into()))?;
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&to_u16(c, "C_total")?.to_le_bytes());
    buf.extend_from_slice(&to_u16(dataset.c_optical, "C_optical")?.to_le_bytes());
    buf.extend_from_slice(&to_u16(w, "W")?.to_le_bytes());
    buf.extend_from_slice(&to_u16(h, "H")?.to_le_bytes());
    for s in &dataset.samples {
        if s.pixels.shape() != [c, h, w] || s.labels.len() != dataset.num_classes {
            return Err(Error::Shape(format!(
                "sample {} does not match the dataset header",
                s.id
            )));
        }
        buf.extend_from_slice(&s.id.to_le_bytes());
        buf.extend_from_slice(&s.labels);
        for &v in s.pixels.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decode the `DMM1` layout, validating magic, version, sizes, and CRC.
pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let num_classes = cur.u16("num_classes")? as usize;
    let n = cur.u32("n_samples")? as usize;
    let c = cur.u16("C_total")? as usize;
    let c_optical = cur.u16("C_optical")? as usize;
    let w = cur.u16("W")? as usize;
    let h = cur.u16("H")? as usize;
    if c_optical > c {
        return Err(Error::Format(format!("C_optical {c_optical} exceeds C_total {c}")));
    }
    let record = 8 + num_classes + 4 * c * h * w;
    let expected = record
        .checked_mul(n)
        .and_then(|r| r.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::Format("declared sizes overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "truncated file: {} bytes, header declares {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after declared records",
            bytes.len() - expected
        )));
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..expected - 4]) != stored {
        return Err(Error::Format("crc mismatch".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = u64::from_le_bytes(cur.take(8, "sample id")?.try_into().expect("8 bytes"));
        let labels = cur.take(num_classes, "labels")?.to_vec();
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format(format!("sample {id}: labels must be 0 or 1")));
        }
        let pixels = cur
            .take(4 * c * h * w, "pixels")?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        samples.push(MultimodalSample {
            id,
            pixels: Tensor::new(&[c, h, w], pixels)?,
            labels,
        });
    }
    Ok(Dataset {
        num_classes,
        c_optical,
        c_sar: c - c_optical,
        height: h,
        width: w,
        samples,
    })
}

pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(dataset)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
