//! Linear-probe evaluation of frozen encoders under modality and label-budget sweeps.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{mask_modality, resize_region, ChannelSplit, CropBox, DropMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ParameterSet, VisionTransformer};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Input modalities available to the probed encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// SAR only.
    #[serde(rename = "s1")]
    S1,
    /// Optical only.
    #[serde(rename = "s2")]
    S2,
    #[serde(rename = "s1+s2")]
    S1S2,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::S1, Modality::S2, Modality::S1S2];

    /// The sensor-drop mode that leaves exactly this modality.
    pub fn drop_mode(self) -> DropMode {
        match self {
            Modality::S1 => DropMode::OpticalDropped,
            Modality::S2 => DropMode::SarDropped,
            Modality::S1S2 => DropMode::KeepBoth,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::S1 => "S1",
            Modality::S2 => "S2",
            Modality::S1S2 => "S1+S2",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Modality::S1),
            "s2" => Ok(Modality::S2),
            "s1+s2" | "s1s2" | "mm" => Ok(Modality::S1S2),
            _ => Err(Error::Config(format!(
                "unknown modality {s:?} (expected s1, s2, s1+s2)"
            ))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Starting learning rate, cosine-decayed to zero over training.
    pub lr: f64,
    pub momentum: f64,
    pub label_fraction: f64,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            label_fraction: 1.0,
            modality: Modality::S1S2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction {} not in (0, 1]",
                self.label_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("probe lr must be > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Resize every sample to `size`, mask the unselected modality, and stack
/// into `[n, C, size, size]`.
pub fn prepare_inputs(dataset: &Dataset, modality: Modality, size: usize) -> Result<Tensor> {
    let split = dataset.channel_split();
    let full = CropBox {
        x: 0,
        y: 0,
        w: dataset.width,
        h: dataset.height,
    };
    let c = dataset.channels();
    let mut data = Vec::with_capacity(dataset.len() * c * size * size);
    for s in &dataset.samples {
        let img = if dataset.width == size && dataset.height == size {
            s.pixels.clone()
        } else {
            resize_region(&s.pixels, full, size)?
        };
        data.extend_from_slice(img.data());
    }
    let mut batch = Tensor::new(&[dataset.len(), c, size, size], data)?;
    mask_modality(&mut batch, modality.drop_mode(), &split)?;
    Ok(batch)
}

fn check_modality(split: &ChannelSplit, modality: Modality) -> Result<()> {
    let missing = match modality {
        Modality::S1 => split.sar.is_empty(),
        Modality::S2 => split.optical.is_empty(),
        Modality::S1S2 => split.sar.is_empty() || split.optical.is_empty(),
    };
    if missing {
        return Err(Error::Config(format!(
            "dataset has no channels for modality {modality}"
        )));
    }
    Ok(())
}

/// Frozen-encoder representations `[n, embed_dim]` of every sample.
///
/// Images are resized to `size` (normally the global crop size) and the
/// unselected modality is zeroed before encoding. Work is split over up to
/// `threads` workers without changing the result.
pub fn extract_features(
    vit: &VisionTransformer,
    params: &ParameterSet,
    dataset: &Dataset,
    modality: Modality,
    size: usize,
    threads: usize,
) -> Result<Tensor> {
    check_modality(&dataset.channel_split(), modality)?;
    if vit.config.in_channels != dataset.channels() {
        return Err(Error::Config(format!(
            "encoder expects {} channels, dataset has {}",
            vit.config.in_channels,
            dataset.channels()
        )));
    }
    let inputs = prepare_inputs(dataset, modality, size)?;
    let n = dataset.len();
    let per = inputs.numel() / n.max(1);
    const CHUNK: usize = 64;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let encode = |&(a, b): &(usize, usize)| -> Result<Vec<f64>> {
        let mut shape = inputs.shape().to_vec();
        shape[0] = b - a;
        let x = Tensor::new(&shape, inputs.data()[a * per..b * per].to_vec())?;
        Ok(vit.encode_tensor(params, &x)?.into_data())
    };
    let threads = threads.clamp(1, chunks.len().max(1));
    let parts: Vec<Vec<f64>> = if threads == 1 {
        chunks.iter().map(encode).collect::<Result<_>>()?
    } else {
        let per_worker = chunks.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per_worker)
                .map(|group| scope.spawn(|| group.iter().map(encode).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("feature worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let feats = Tensor::new(&[n, vit.config.embed_dim], parts.concat())?;
    feats.check_finite("features")?;
    Ok(feats)
}

/// Flattened masked pixels at `size x size`, for probing the raw input.
pub fn raw_features(dataset: &Dataset, modality: Modality, size: usize) -> Result<Tensor> {
    check_modality(&dataset.channel_split(), modality)?;
    let x = prepare_inputs(dataset, modality, size)?;
    let n = dataset.len();
    x.reshape(&[n, x.numel() / n.max(1)])
}

/// Indices of a labelled subset of size `max(1, round(fraction·n))`.
///
/// Classes are visited from rarest to most common; each class not yet
/// covered gets one random positive. The rest is filled uniformly at random.
pub fn stratified_subset(labels: &Tensor, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let [n, k] = *labels.shape() else {
        return Err(Error::Shape(format!("labels must be [n, C], got {:?}", labels.shape())));
    };
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} not in (0, 1]")));
    }
    let target = ((fraction * n as f64).round() as usize).clamp(1, n.max(1));
    if target >= n {
        return Ok((0..n).collect());
    }
    let mut rng = rng::stream(seed, domain::SUBSET, 0, 0);
    let pos = |i: usize, c: usize| labels.data()[i * k + c] > 0.5;
    let mut classes: Vec<(usize, usize)> = (0..k).map(|c| ((0..n).filter(|&i| pos(i, c)).count(), c)).collect();
    classes.sort();
    let mut chosen = BTreeSet::new();
    for &(count, c) in &classes {
        if count == 0 || chosen.len() >= target || chosen.iter().any(|&i| pos(i, c)) {
            continue;
        }
        let candidates: Vec<usize> = (0..n).filter(|&i| pos(i, c)).collect();
        chosen.insert(*candidates.choose(&mut rng).expect("count > 0"));
    }
    let mut rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
    rest.shuffle(&mut rng);
    chosen.extend(rest.into_iter().take(target - chosen.len()));
    Ok(chosen.into_iter().collect())
}

/// Per-feature affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let [n, d] = *x.shape() else {
            return Err(Error::Shape(format!("features must be [n, d], got {:?}", x.shape())));
        };
        if n == 0 {
            return Err(Error::Input("no feature rows".into()));
        }
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            var.iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::Shape(format!(
                "features {:?} do not have {d} columns",
                x.shape()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// `z = x W^T + b` multi-label classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[C, d]`.
    pub weight: Tensor,
    /// `[C]`.
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c, d]),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let (c, d) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::Shape(format!(
                "probe expects [n, {d}] features, got {:?}",
                x.shape()
            )));
        }
        let (w, b) = (self.weight.data(), self.bias.data());
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| (0..c).map(move |j| b[j] + dot(row, &w[j * d..(j + 1) * d])))
            .collect();
        Tensor::new(&[x.shape()[0], c], data)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Multi-label soft-margin loss averaged over classes and samples.
pub fn soft_margin_loss(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    if scores.shape() != labels.shape() || scores.ndim() != 2 {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    let total: f64 = scores
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&z, &y)| -(y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z)))
        .sum();
    Ok(total / scores.numel().max(1) as f64)
}

/// Fit a [`LinearProbe`] with momentum SGD and a cosine-decayed learning rate.
/// Returns the probe and the loss over the training set after each epoch.
pub fn train_probe(features: &Tensor, labels: &Tensor, cfg: &ProbeConfig) -> Result<(LinearProbe, Vec<f64>)> {
    cfg.validate()?;
    let [n, d] = *features.shape() else {
        return Err(Error::Shape(format!(
            "features must be [n, d], got {:?}",
            features.shape()
        )));
    };
    if labels.ndim() != 2 || labels.shape()[0] != n {
        return Err(Error::Shape(format!(
            "labels {:?} do not match {n} feature rows",
            labels.shape()
        )));
    }
    if n == 0 {
        return Err(Error::Input("no training rows for the probe".into()));
    }
    features.check_finite("probe features")?;
    let c = labels.shape()[1];
    let mut probe = LinearProbe::zeros(d, c);
    let mut vel_w = vec![0.0; c * d];
    let mut vel_b = vec![0.0; c];
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let (x, y) = (features.data(), labels.data());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, domain::PROBE, epoch as u64, 0));
        for batch in order.chunks(cfg.batch_size) {
            let lr = 0.5 * cfg.lr * (1.0 + (PI * step as f64 / total).cos());
            let scale = 1.0 / (batch.len() * c) as f64;
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            for &i in batch {
                let row = &x[i * d..(i + 1) * d];
                for j in 0..c {
                    let w = &probe.weight.data()[j * d..(j + 1) * d];
                    let z = probe.bias.data()[j] + dot(row, w);
                    let r = (sigmoid(z) - y[i * c + j]) * scale;
                    gb[j] += r;
                    gw[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(g, v)| *g += r * v);
                }
            }
            for (p, (v, g)) in probe.weight.data_mut().iter_mut().zip(vel_w.iter_mut().zip(&gw)) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            for (p, (v, g)) in probe.bias.data_mut().iter_mut().zip(vel_b.iter_mut().zip(&gb)) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            step += 1;
        }
        history.push(soft_margin_loss(&probe.scores(features)?, labels)?);
    }
    Ok((probe, history))
}

/// Per-class average precision and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Average precision per class with ties kept in sample order; mAP over
/// classes that have at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<ApSummary> {
    if scores.shape() != labels.shape() || scores.ndim() != 2 {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    let (n, c) = (scores.shape()[0], scores.shape()[1]);
    let (s, y) = (scores.data(), labels.data());
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|j| {
            let n_pos = (0..n).filter(|&i| y[i * c + j] > 0.5).count();
            if n_pos == 0 {
                return None;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| s[b * c + j].total_cmp(&s[a * c + j]));
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                if y[i * c + j] > 0.5 {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            Some(sum / n_pos as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Input("no class has a positive label".into()));
    }
    let map = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(ApSummary { per_class, map })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub config: ProbeConfig,
    pub modality: Modality,
    /// Labelled training rows actually used.
    pub n_train: usize,
    pub final_train_loss: f64,
}

/// Probe on precomputed features. Standardization statistics come from all
/// training features, so the label budget affects only which rows are fitted.
pub fn probe_features(
    train_x: &Tensor,
    train_y: &Tensor,
    test_x: &Tensor,
    test_y: &Tensor,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let scaler = FeatureScaler::fit(train_x)?;
    let (tx, vx) = (scaler.transform(train_x)?, scaler.transform(test_x)?);
    let subset = stratified_subset(train_y, cfg.label_fraction, cfg.seed)?;
    let (d, c) = (tx.shape()[1], train_y.shape()[1]);
    let sx = Tensor::new(
        &[subset.len(), d],
        subset
            .iter()
            .flat_map(|&i| tx.data()[i * d..(i + 1) * d].iter().copied())
            .collect(),
    )?;
    let sy = Tensor::new(
        &[subset.len(), c],
        subset
            .iter()
            .flat_map(|&i| train_y.data()[i * c..(i + 1) * c].iter().copied())
            .collect(),
    )?;
    let (probe, history) = train_probe(&sx, &sy, cfg)?;
    let ap = mean_average_precision(&probe.scores(&vx)?, test_y)?;
    Ok(ProbeResult {
        per_class_ap: ap.per_class,
        map: ap.map,
        config: cfg.clone(),
        modality: cfg.modality,
        n_train: subset.len(),
        final_train_loss: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Extract features of both splits under `cfg.modality` and run the probe.
pub fn evaluate(
    vit: &VisionTransformer,
    params: &ParameterSet,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    size: usize,
    threads: usize,
) -> Result<ProbeResult> {
    if train.num_classes != test.num_classes || train.channel_split() != test.channel_split() {
        return Err(Error::Config("train and test datasets have different layouts".into()));
    }
    let tx = extract_features(vit, params, train, cfg.modality, size, threads)?;
    let vx = extract_features(vit, params, test, cfg.modality, size, threads)?;
    probe_features(&tx, &train.label_matrix(), &vx, &test.label_matrix(), cfg)
}

/// mAP grid: one row per checkpoint tag, one column per (modality, label fraction).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<(Modality, f64)>,
    pub rows: Vec<(String, Vec<ProbeResult>)>,
}

impl Report {
    pub fn new(modalities: &[Modality], fractions: &[f64]) -> Self {
        Self {
            columns: modalities
                .iter()
                .flat_map(|&m| fractions.iter().map(move |&f| (m, f)))
                .collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, tag: impl Into<String>, results: Vec<ProbeResult>) -> Result<()> {
        if results.len() != self.columns.len() {
            return Err(Error::Contract(format!(
                "row has {} cells, report has {} columns",
                results.len(),
                self.columns.len()
            )));
        }
        self.rows.push((tag.into(), results));
        Ok(())
    }

    pub fn cell(&self, tag: &str, modality: Modality, fraction: f64) -> Option<&ProbeResult> {
        let col = self.columns.iter().position(|&(m, f)| m == modality && f == fraction)?;
        self.rows.iter().find(|(t, _)| t == tag).map(|(_, r)| &r[col])
    }

    /// Plain-text table with mAP in percent.
    pub fn to_text(&self) -> String {
        let tag_w = self.rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(10);
        let mut out = String::new();
        let _ = write!(out, "{:<tag_w$}", "checkpoint");
        for (m, f) in &self.columns {
            let _ = write!(out, " | {:>12}", format!("{m} {}%", fmt_pct(*f)));
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(tag_w + 15 * self.columns.len()));
        for (tag, cells) in &self.rows {
            let _ = write!(out, "{tag:<tag_w$}");
            for r in cells {
                let _ = write!(out, " | {:>12.1}", 100.0 * r.map);
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_pct(f: f64) -> String {
    let p = 100.0 * f;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_ap() {
        let s = Tensor::new(&[3, 1], vec![0.9, 0.8, 0.1]).unwrap();
        let y = Tensor::new(&[3, 1], vec![1.0, 0.0, 1.0]).unwrap();
        let ap = mean_average_precision(&s, &y).unwrap();
        assert!((ap.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ties_follow_sample_order() {
        let s = Tensor::new(&[2, 1], vec![0.5, 0.5]).unwrap();
        let y = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert!((mean_average_precision(&s, &y).unwrap().map - 0.5).abs() < 1e-15);
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("S1+S2".parse::<Modality>().unwrap(), Modality::S1S2);
        assert!("s3".parse::<Modality>().is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
