use dinomm::augment::{
    channel_grayscale, channel_jitter, gaussian_blur, hflip, make_view_batch, make_views, mask_modality,
    random_resized_crop, random_sensor_drop, resize_region, sample_drop_mode, solarize, view_rng, AugConfig,
    ChannelSplit, CropBox, DropMode, ViewRecord,
};
use dinomm::data::{generate_synthetic, MultimodalSample};
use dinomm::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn sample(seed: u64) -> MultimodalSample {
    MultimodalSample {
        id: seed,
        pixels: rand_image(14, 64, 64, seed),
        labels: vec![1, 0, 0, 1, 0, 0, 0, 0],
    }
}

fn assert_zeroing(v: &ViewRecord, split: &ChannelSplit) {
    let plane = v.image.shape()[1] * v.image.shape()[2];
    let range = match v.drop_mode {
        DropMode::OpticalDropped => split.optical.clone(),
        DropMode::SarDropped => split.sar.clone(),
        DropMode::KeepBoth => return,
    };
    let zeros = &v.image.data()[range.start * plane..range.end * plane];
    assert!(zeros.iter().all(|x| x.to_bits() == 0), "dropped channels must be +0.0");
}

#[test]
fn degenerate_crop_is_full_resize() {
    let img = rand_image(3, 12, 12, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, crop) = random_resized_crop(&img, (1.0, 1.0), (1.0, 1.0), 6, &mut rng).unwrap();
    assert_eq!(
        crop,
        CropBox {
            x: 0,
            y: 0,
            w: 12,
            h: 12
        }
    );
    assert!(out.bit_eq(&resize_region(&img, crop, 6).unwrap()));
}

#[test]
fn constant_image_stays_constant() {
    let img = Tensor::full(&[2, 20, 20], -0.75);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (out, _) = random_resized_crop(&img, (0.05, 0.4), (0.75, 4.0 / 3.0), 16, &mut rng).unwrap();
    assert_eq!(out.shape(), &[2, 16, 16]);
    assert!(out.data().iter().all(|&v| (v + 0.75).abs() < 1e-15));
}

#[test]
fn crop_is_deterministic_per_rng_state() {
    let img = rand_image(3, 30, 30, 2);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        random_resized_crop(&img, (0.2, 0.9), (0.75, 4.0 / 3.0), 10, &mut rng).unwrap()
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(ca, cb);
    assert!(a.bit_eq(&b));
}

#[test]
fn degenerate_source_is_input_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = random_resized_crop(&Tensor::zeros(&[1, 1, 1]), (1.0, 1.0), (1.0, 1.0), 1, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

#[test]
fn photometric_fixed_points() {
    let img = rand_image(4, 6, 7, 5);
    assert!(hflip(&hflip(&img).unwrap()).unwrap().bit_eq(&img));
    let flipped = hflip(&img).unwrap();
    assert_eq!(flipped.data()[0], img.data()[6]);

    let plane: Vec<f64> = rand_image(1, 6, 7, 6).into_data();
    let same = Tensor::new(&[3, 6, 7], plane.repeat(3)).unwrap();
    let g = channel_grayscale(&same).unwrap();
    for (a, b) in g.data().iter().zip(same.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    assert!(solarize(&img, 1.5).unwrap().bit_eq(&img));
}

#[test]
fn solarize_inverts_the_upper_range() {
    let img = Tensor::new(&[1, 1, 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = solarize(&img, 0.5).unwrap();
    // Normalized 0, .25, .5, .75, 1 -> 0, .25, .5, .25, 0.
    assert_eq!(out.data(), &[0.0, 1.0, 2.0, 1.0, 0.0]);
}

#[test]
fn jitter_applies_per_channel_affine() {
    let img = rand_image(2, 3, 3, 8);
    let out = channel_jitter(&img, &[1.2, 0.8], &[0.1, -0.3]).unwrap();
    for i in 0..9 {
        assert!((out.data()[i] - (img.data()[i] * 1.2 + 0.1)).abs() < 1e-15);
        assert!((out.data()[9 + i] - (img.data()[9 + i] * 0.8 - 0.3)).abs() < 1e-15);
    }
    assert!(matches!(channel_jitter(&img, &[1.0], &[0.0]), Err(Error::Shape(_))));
}

#[test]
fn blur_smooths_an_impulse_symmetrically() {
    let mut img = Tensor::zeros(&[1, 9, 9]);
    img.data_mut()[4 * 9 + 4] = 1.0;
    let out = gaussian_blur(&img, 1.0).unwrap();
    assert!((out.sum() - 1.0).abs() < 1e-12);
    let at = |y: usize, x: usize| out.data()[y * 9 + x];
    assert!((at(4, 3) - at(4, 5)).abs() < 1e-15);
    assert!((at(3, 4) - at(4, 3)).abs() < 1e-15);
    assert!(at(4, 4) > at(4, 3));
}

#[test]
fn sensor_drop_examples() {
    let ones = Tensor::full(&[14, 4, 4], 1.0);
    let split = ChannelSplit::default();
    let mut dropped = ones.clone();
    mask_modality(&mut dropped, DropMode::OpticalDropped, &split).unwrap();
    assert!(dropped.data()[..12 * 16].iter().all(|&v| v == 0.0));
    assert!(dropped.data()[12 * 16..].iter().all(|&v| v == 1.0));

    let mut kept = ones.clone();
    mask_modality(&mut kept, DropMode::KeepBoth, &split).unwrap();
    assert!(kept.bit_eq(&ones));

    let always_sar = AugConfig {
        sensor_drop_probs: (1.0, 0.0, 0.0),
        ..AugConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, mode) = random_sensor_drop(&ones, &always_sar, &mut rng).unwrap();
    assert_eq!(mode, DropMode::SarDropped);
    assert!(out.data()[12 * 16..].iter().all(|&v| v == 0.0));
}

#[test]
fn nine_pair_combinations_are_uniform() {
    let probs = AugConfig::default().sensor_drop_probs;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mut counts: HashMap<(char, char), usize> = HashMap::new();
    for _ in 0..n {
        let a = sample_drop_mode(probs, &mut rng).letter();
        let b = sample_drop_mode(probs, &mut rng).letter();
        *counts.entry((a, b)).or_default() += 1;
    }
    assert_eq!(counts.len(), 9);
    for (pair, c) in counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 9.0).abs() < 0.01, "{pair:?}: {f}");
    }
}

#[test]
fn mode_frequencies_follow_configured_probs() {
    for probs in [(0.2, 0.5, 0.3), (0.0, 0.0, 1.0), (0.6, 0.4, 0.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_drop_mode(probs, &mut rng) {
                DropMode::SarDropped => counts[0] += 1,
                DropMode::OpticalDropped => counts[1] += 1,
                DropMode::KeepBoth => counts[2] += 1,
            }
        }
        for (c, p) in counts.iter().zip([probs.0, probs.1, probs.2]) {
            let f = *c as f64 / n as f64;
            assert!(
                (f - p).abs() <= 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-12,
                "{f} vs {p}"
            );
        }
    }
}

#[test]
fn make_views_layout_and_invariants() {
    let cfg = AugConfig::default();
    let s = sample(3);
    let views = make_views(&s, &cfg, &mut view_rng(1, 0, s.id)).unwrap();
    assert_eq!(views.len(), 10);
    for (i, v) in views.iter().enumerate() {
        let size = if i < 2 { 32 } else { 16 };
        assert_eq!(v.is_global, i < 2);
        assert_eq!(v.image.shape(), &[14, size, size]);
        assert!(matches!(v.steps.last(), Some(dinomm::augment::AugStep::SensorDrop(m)) if *m == v.drop_mode));
        assert_zeroing(v, &cfg.channels);
    }
    assert_eq!(s.labels, vec![1, 0, 0, 1, 0, 0, 0, 0]);
}

#[test]
fn degenerate_config_views_are_resized_originals() {
    let cfg = AugConfig::deterministic();
    let s = sample(4);
    let views = make_views(&s, &cfg, &mut view_rng(0, 0, 0)).unwrap();
    let full = CropBox {
        x: 0,
        y: 0,
        w: 64,
        h: 64,
    };
    for v in &views {
        let size = if v.is_global { 32 } else { 16 };
        assert_eq!(v.drop_mode, DropMode::KeepBoth);
        assert!(v.image.bit_eq(&resize_region(&s.pixels, full, size).unwrap()));
    }
}

#[test]
fn views_are_deterministic_and_seed_dependent() {
    let cfg = AugConfig::default();
    let s = sample(5);
    let a = make_views(&s, &cfg, &mut view_rng(7, 2, s.id)).unwrap();
    let b = make_views(&s, &cfg, &mut view_rng(7, 2, s.id)).unwrap();
    let c = make_views(&s, &cfg, &mut view_rng(7, 3, s.id)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn channel_mismatch_is_shape_error() {
    let cfg = AugConfig::default();
    let s = MultimodalSample {
        id: 0,
        pixels: rand_image(13, 32, 32, 0),
        labels: vec![1],
    };
    assert!(matches!(
        make_views(&s, &cfg, &mut view_rng(0, 0, 0)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn view_batch_is_view_major_and_thread_invariant() {
    let data = generate_synthetic(10, 8, 32, 1).unwrap();
    let refs: Vec<_> = data.samples.iter().collect();
    let cfg = AugConfig::default();
    let one = make_view_batch(&refs, &cfg, 3, 1, 1).unwrap();
    let four = make_view_batch(&refs, &cfg, 3, 1, 4).unwrap();
    assert!(one.global.bit_eq(&four.global));
    assert!(one.local.bit_eq(&four.local));
    assert_eq!(one.modes, four.modes);
    assert_eq!(one.global.shape(), &[20, 14, 32, 32]);
    assert_eq!(one.local.shape(), &[80, 14, 16, 16]);

    // Row v*B + i of the global stack is view v of sample i.
    let per = 14 * 32 * 32;
    let views = make_views(refs[3], &cfg, &mut view_rng(3, 1, refs[3].id)).unwrap();
    assert_eq!(
        &one.global.data()[(10 + 3) * per..(10 + 4) * per],
        views[1].image.data()
    );
}

#[test]
fn config_validation() {
    let bad_scale = AugConfig {
        local_scale: (0.5, 0.2),
        ..AugConfig::default()
    };
    assert!(matches!(bad_scale.validate(), Err(Error::Config(_))));
    let bad_probs = AugConfig {
        sensor_drop_probs: (0.5, -0.1, 0.6),
        ..AugConfig::default()
    };
    assert!(bad_probs.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_view_satisfies_zeroing(seed in 0u64..10_000, epoch in 0u64..50) {
        let cfg = AugConfig::default();
        let s = sample(seed % 7);
        for v in make_views(&s, &cfg, &mut view_rng(seed, epoch, s.id)).unwrap() {
            assert_zeroing(&v, &cfg.channels);
        }
    }

    #[test]
    fn crops_stay_inside_source(seed in 0u64..10_000, h in 2usize..40, w in 2usize..40) {
        let img = Tensor::zeros(&[1, h, w]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, c) = random_resized_crop(&img, (0.05, 1.0), (0.75, 4.0 / 3.0), 4, &mut rng).unwrap();
        prop_assert!(c.w >= 1 && c.h >= 1 && c.x + c.w <= w && c.y + c.h <= h);
    }
}
