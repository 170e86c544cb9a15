//! Seeded multi-crop view generation for concatenated optical+SAR stacks.
//!
//! Every view runs the chain crop → flip → jitter → grayscale → blur →
//! solarize → sensor drop. The sensor drop runs last so no photometric
//! step can write non-zero values back into a dropped modality.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Channel index ranges of the two modalities inside the stacked input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSplit {
    pub optical: Range<usize>,
    pub sar: Range<usize>,
}

impl ChannelSplit {
    /// Optical channels first, SAR after.
    pub fn new(c_optical: usize, c_sar: usize) -> Self {
        Self {
            optical: 0..c_optical,
            sar: c_optical..c_optical + c_sar,
        }
    }

    pub fn total(&self) -> usize {
        self.optical.len() + self.sar.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (o, s) = (&self.optical, &self.sar);
        let ok = !o.is_empty()
            && !s.is_empty()
            && ((o.start == 0 && o.end == s.start) || (s.start == 0 && s.end == o.start));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "optical {o:?} and SAR {s:?} must partition [0, C) without overlap"
            )))
        }
    }
}

impl Default for ChannelSplit {
    fn default() -> Self {
        Self::new(12, 2)
    }
}

/// Which modality a view has had zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropMode {
    /// SAR zeroed; the view is optical-only (`O`).
    SarDropped,
    /// Optical zeroed; the view is SAR-only (`S`).
    OpticalDropped,
    /// Both modalities kept (`M`).
    KeepBoth,
}

impl DropMode {
    pub const ALL: [DropMode; 3] = [DropMode::OpticalDropped, DropMode::SarDropped, DropMode::KeepBoth];

    /// Letter of the modality content left in the view.
    pub fn letter(self) -> char {
        match self {
            DropMode::OpticalDropped => 'S',
            DropMode::SarDropped => 'O',
            DropMode::KeepBoth => 'M',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugConfig {
    pub global_crop_size: usize,
    pub local_crop_size: usize,
    pub local_crop_count: usize,
    /// Area fraction range of global crops.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Aspect-ratio range sampled log-uniformly.
    pub aspect_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob: f64,
    /// Threshold on per-channel min-max normalized values.
    pub solarize_threshold: f64,
    /// `(drop SAR, drop optical, keep both)`.
    pub sensor_drop_probs: (f64, f64, f64),
    pub channels: ChannelSplit,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            global_crop_size: 32,
            local_crop_size: 16,
            local_crop_count: 8,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
            sensor_drop_probs: (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
            channels: ChannelSplit::default(),
        }
    }
}

fn check_scale(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if 0.0 < lo && lo <= hi && hi <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
        )))
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

impl AugConfig {
    /// Every stochastic step off, full-image crops.
    pub fn deterministic() -> Self {
        Self {
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            sensor_drop_probs: (0.0, 0.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale("global_scale", self.global_scale)?;
        check_scale("local_scale", self.local_scale)?;
        let (a, b) = self.aspect_ratio;
        if !(0.0 < a && a <= b) {
            return Err(Error::Config(format!("aspect_ratio ({a}, {b}) invalid")));
        }
        for (n, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ] {
            check_prob(n, p)?;
        }
        let (p0, p1, p2) = self.sensor_drop_probs;
        if [p0, p1, p2].iter().any(|p| !(*p >= 0.0)) || ((p0 + p1 + p2) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "sensor_drop_probs ({p0}, {p1}, {p2}) must be nonnegative and sum to 1"
            )));
        }
        if self.global_crop_size < 1 || self.local_crop_size < 1 {
            return Err(Error::Config("crop sizes must be positive".into()));
        }
        if !(self.jitter_strength >= 0.0) {
            return Err(Error::Config("jitter_strength must be >= 0".into()));
        }
        let (s0, s1) = self.blur_sigma;
        if !(0.0 < s0 && s0 <= s1) {
            return Err(Error::Config(format!("blur_sigma ({s0}, {s1}) invalid")));
        }
        self.channels.validate()
    }
}

/// Crop rectangle in source pixels (`x` along the last axis).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One applied augmentation step with the random values it drew.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugStep {
    Crop(CropBox),
    Flip,
    Jitter { gains: Vec<f64>, offsets: Vec<f64> },
    Grayscale,
    Blur { sigma: f64 },
    Solarize { threshold: f64 },
    SensorDrop(DropMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    /// `[C, s, s]`.
    pub image: Tensor,
    pub is_global: bool,
    pub drop_mode: DropMode,
    pub crop: CropBox,
    pub flipped: bool,
    pub steps: Vec<AugStep>,
}

fn dims3(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected a [C, H, W] image, got {:?}",
            img.shape()
        ))),
    }
}

/// Bilinearly resample the `crop` region of every channel to `out x out`.
pub fn resize_region(img: &Tensor, crop: CropBox, out: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img)?;
    if crop.w == 0 || crop.h == 0 || crop.x + crop.w > w || crop.y + crop.h > h || out == 0 {
        return Err(Error::Input(format!("crop {crop:?} invalid for {h}x{w} image")));
    }
    let axis = |start: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let p = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (start + i0, start + i1, p - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(crop.y, crop.h), axis(crop.x, crop.w));
    let src = img.data();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out, out], data)
}

/// Sample an area fraction and aspect ratio, crop, and resize to `out_size`.
pub fn random_resized_crop(
    img: &Tensor,
    scale: (f64, f64),
    ratio: (f64, f64),
    out_size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, CropBox)> {
    let (_, h, w) = dims3(img)?;
    if h < 2 || w < 2 {
        return Err(Error::Input(format!("source image {h}x{w} too small to crop")));
    }
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    let mut chosen = None;
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let ar = uniform(rng, lr0, lr1).exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let x = rng.gen_range(0..=w - cw);
            let y = rng.gen_range(0..=h - ch);
            chosen = Some(CropBox { x, y, w: cw, h: ch });
            break;
        }
    }
    let crop = chosen.unwrap_or_else(|| {
        // Centre crop at the clamped aspect ratio.
        let r = w as f64 / h as f64;
        let (cw, ch) = if r < ratio.0 {
            (w, ((w as f64 / ratio.0).round() as usize).clamp(1, h))
        } else if r > ratio.1 {
            (((h as f64 * ratio.1).round() as usize).clamp(1, w), h)
        } else {
            (w, h)
        };
        CropBox {
            x: (w - cw) / 2,
            y: (h - ch) / 2,
            w: cw,
            h: ch,
        }
    });
    Ok((resize_region(img, crop, out_size)?, crop))
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Mirror along the last (width) axis.
pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims3(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Per-channel `v * gain + offset`.
pub fn channel_jitter(img: &Tensor, gains: &[f64], offsets: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims3(img)?;
    if gains.len() != c || offsets.len() != c {
        return Err(Error::Shape(format!(
            "jitter parameters for {} channels, image has {c}",
            gains.len()
        )));
    }
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        plane.iter_mut().for_each(|v| *v = *v * gains[ch] + offsets[ch]);
    }
    Ok(out)
}

/// Replace every channel with the cross-channel mean.
pub fn channel_grayscale(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(img)?;
    let hw = h * w;
    let src = img.data();
    let mean: Vec<f64> = (0..hw)
        .map(|i| (0..c).map(|ch| src[ch * hw + i]).sum::<f64>() / c as f64)
        .collect();
    let data = (0..c).flat_map(|_| mean.iter().copied()).collect();
    Tensor::new(img.shape(), data)
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = dims3(img)?;
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    for plane in out.data_mut().chunks_mut(h * w).take(c) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                        kv * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                        kv * tmp[yy * w + x]
                    })
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Per channel: min-max normalize, map `u -> 1 - u` where `u >= threshold`, map back.
pub fn solarize(img: &Tensor, threshold: f64) -> Result<Tensor> {
    let (_, h, w) = dims3(img)?;
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if !(span > 0.0) {
            continue;
        }
        for v in plane.iter_mut() {
            let u = (*v - lo) / span;
            if u >= threshold {
                *v = lo + (1.0 - u) * span;
            }
        }
    }
    Ok(out)
}

/// Zero the channels of whichever modality `mode` removes.
///
/// This is the only place modality channels are zeroed; evaluation-time
/// modality selection calls it too.
pub fn mask_modality(img: &mut Tensor, mode: DropMode, split: &ChannelSplit) -> Result<()> {
    let shape = img.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("expected [.., C, H, W], got {shape:?}")));
    }
    let c = shape[shape.len() - 3];
    if c != split.total() {
        return Err(Error::Shape(format!(
            "image has {c} channels, split expects {}",
            split.total()
        )));
    }
    let range = match mode {
        DropMode::KeepBoth => return Ok(()),
        DropMode::SarDropped => &split.sar,
        DropMode::OpticalDropped => &split.optical,
    };
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    for sample in img.data_mut().chunks_mut(c * plane) {
        sample[range.start * plane..range.end * plane].fill(0.0);
    }
    Ok(())
}

pub fn sample_drop_mode(probs: (f64, f64, f64), rng: &mut impl Rng) -> DropMode {
    let u: f64 = rng.gen();
    if u < probs.0 {
        DropMode::SarDropped
    } else if u < probs.0 + probs.1 {
        DropMode::OpticalDropped
    } else {
        DropMode::KeepBoth
    }
}

/// Draw a drop mode from `config.sensor_drop_probs` and apply it.
pub fn random_sensor_drop(img: &Tensor, config: &AugConfig, rng: &mut impl Rng) -> Result<(Tensor, DropMode)> {
    let mode = sample_drop_mode(config.sensor_drop_probs, rng);
    let mut out = img.clone();
    mask_modality(&mut out, mode, &config.channels)?;
    Ok((out, mode))
}

fn augment_view(src: &Tensor, cfg: &AugConfig, global: bool, rng: &mut impl Rng) -> Result<ViewRecord> {
    let (scale, size) = if global {
        (cfg.global_scale, cfg.global_crop_size)
    } else {
        (cfg.local_scale, cfg.local_crop_size)
    };
    let mut steps = Vec::new();
    let (mut img, crop) = random_resized_crop(src, scale, cfg.aspect_ratio, size, rng)?;
    steps.push(AugStep::Crop(crop));
    let flipped = rng.gen::<f64>() < cfg.flip_prob;
    if flipped {
        img = hflip(&img)?;
        steps.push(AugStep::Flip);
    }
    if rng.gen::<f64>() < cfg.jitter_prob {
        let c = img.shape()[0];
        let s = cfg.jitter_strength;
        let gains: Vec<f64> = (0..c).map(|_| uniform(rng, 1.0 - s, 1.0 + s)).collect();
        let offsets: Vec<f64> = (0..c).map(|_| uniform(rng, -s, s)).collect();
        img = channel_jitter(&img, &gains, &offsets)?;
        steps.push(AugStep::Jitter { gains, offsets });
    }
    if rng.gen::<f64>() < cfg.grayscale_prob {
        img = channel_grayscale(&img)?;
        steps.push(AugStep::Grayscale);
    }
    if rng.gen::<f64>() < cfg.blur_prob {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        img = gaussian_blur(&img, sigma)?;
        steps.push(AugStep::Blur { sigma });
    }
    if rng.gen::<f64>() < cfg.solarize_prob {
        img = solarize(&img, cfg.solarize_threshold)?;
        steps.push(AugStep::Solarize {
            threshold: cfg.solarize_threshold,
        });
    }
    let (img, drop_mode) = random_sensor_drop(&img, cfg, rng)?;
    steps.push(AugStep::SensorDrop(drop_mode));
    Ok(ViewRecord {
        image: img,
        is_global: global,
        drop_mode,
        crop,
        flipped,
        steps,
    })
}

/// Two global then `local_crop_count` local views of one sample.
pub fn make_views(sample: &MultimodalSample, config: &AugConfig, rng: &mut impl Rng) -> Result<Vec<ViewRecord>> {
    let c = sample.pixels.shape().first().copied().unwrap_or(0);
    if c != config.channels.total() {
        return Err(Error::Shape(format!(
            "sample has {c} channels, augmentation config expects {}",
            config.channels.total()
        )));
    }
    (0..2 + config.local_crop_count)
        .map(|i| augment_view(&sample.pixels, config, i < 2, rng))
        .collect()
}

/// Random stream for one sample's views in one epoch.
pub fn view_rng(seed: u64, epoch: u64, sample_id: u64) -> ChaCha8Rng {
    rng::stream(seed, domain::VIEWS, epoch, sample_id)
}

/// Views of a batch stacked view-major for the encoder.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    /// `[2·B, C, g, g]`: all samples' first global view, then all second.
    pub global: Tensor,
    /// `[L·B, C, l, l]`, view-major like `global`.
    pub local: Tensor,
    /// `modes[sample][view]`.
    pub modes: Vec<Vec<DropMode>>,
    pub batch_size: usize,
}

impl ViewBatch {
    pub fn n_views(&self) -> usize {
        self.modes.first().map_or(0, Vec::len)
    }
}

fn stack_views(records: &[Vec<ViewRecord>], views: Range<usize>) -> Result<Tensor> {
    let b = records.len();
    let Some(first) = records.first().and_then(|r| r.get(views.start)) else {
        return Ok(Tensor::zeros(&[0]));
    };
    let mut shape = vec![views.len() * b];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for v in views {
        for r in records {
            data.extend_from_slice(r[v].image.data());
        }
    }
    Tensor::new(&shape, data)
}

/// Views for every sample, generated on up to `threads` workers. Output
/// order and values do not depend on the worker count.
pub fn make_view_batch(
    samples: &[&MultimodalSample],
    config: &AugConfig,
    seed: u64,
    epoch: u64,
    threads: usize,
) -> Result<ViewBatch> {
    let gen = |s: &MultimodalSample| make_views(s, config, &mut view_rng(seed, epoch, s.id));
    let threads = threads.clamp(1, samples.len().max(1));
    let records: Vec<Vec<ViewRecord>> = if threads == 1 {
        samples.iter().map(|s| gen(s)).collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| gen(s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("view worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let n_views = 2 + config.local_crop_count;
    Ok(ViewBatch {
        global: stack_views(&records, 0..2)?,
        local: stack_views(&records, 2..n_views)?,
        modes: records
            .iter()
            .map(|r| r.iter().map(|v| v.drop_mode).collect())
            .collect(),
        batch_size: samples.len(),
    })
}
