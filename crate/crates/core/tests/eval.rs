use dinomm::augment::{mask_modality, resize_region, ChannelSplit, CropBox, DropMode};
use dinomm::data::generate_synthetic;
use dinomm::eval::{
    evaluate, extract_features, mean_average_precision, prepare_inputs, soft_margin_loss, stratified_subset,
    train_probe, LinearProbe, Modality, ProbeConfig, Report,
};
use dinomm::nn::{ParameterSet, ViTConfig, VisionTransformer};
use dinomm::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        in_channels: 14,
        embed_dim: 12,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
        head_hidden_dim: 8,
        head_bottleneck_dim: 4,
        head_layers: 2,
        out_dim: 8,
    }
}

#[test]
fn perfect_ranking_scores_one() {
    let s = Tensor::new(&[4, 2], vec![0.9, 0.1, 0.8, 0.7, 0.2, 0.6, 0.1, 0.0]).unwrap();
    let y = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let ap = mean_average_precision(&s, &y).unwrap();
    assert_eq!(ap.per_class, vec![Some(1.0), Some(1.0)]);
    assert_eq!(ap.map, 1.0);
}

#[test]
fn hand_enumerated_average_precision() {
    let s = Tensor::new(&[3, 1], vec![0.9, 0.8, 0.1]).unwrap();
    let y = Tensor::new(&[3, 1], vec![1.0, 0.0, 1.0]).unwrap();
    let ap = mean_average_precision(&s, &y).unwrap();
    assert!((ap.map - 0.8333333333333334).abs() < 1e-15);
}

#[test]
fn classes_without_positives_are_excluded() {
    let s = Tensor::new(&[3, 2], vec![0.9, 0.3, 0.8, 0.2, 0.1, 0.1]).unwrap();
    let y = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let ap = mean_average_precision(&s, &y).unwrap();
    assert_eq!(ap.per_class[1], None);
    assert!((ap.map - 0.8333333333333334).abs() < 1e-15);
    let none = Tensor::zeros(&[3, 2]);
    assert!(matches!(mean_average_precision(&s, &none), Err(Error::Input(_))));
    assert!(matches!(
        mean_average_precision(&s, &Tensor::zeros(&[2, 2])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn random_scores_give_the_positive_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let rates = [0.5, 0.2, 0.05];
    let mut s = Vec::with_capacity(n * 3);
    let mut y = Vec::with_capacity(n * 3);
    for _ in 0..n {
        for &r in &rates {
            s.push(rng.gen::<f64>());
            y.push(if rng.gen::<f64>() < r { 1.0 } else { 0.0 });
        }
    }
    let ap = mean_average_precision(&Tensor::new(&[n, 3], s).unwrap(), &Tensor::new(&[n, 3], y).unwrap()).unwrap();
    for (got, &r) in ap.per_class.iter().zip(&rates) {
        assert!((got.unwrap() - r).abs() < 0.05, "{got:?} vs {r}");
    }
}

#[test]
fn single_sample_zero_logit_costs_ln2() {
    let l = soft_margin_loss(
        &Tensor::new(&[1, 1], vec![0.0]).unwrap(),
        &Tensor::new(&[1, 1], vec![1.0]).unwrap(),
    );
    assert!((l.unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let probe = LinearProbe::zeros(3, 2);
    let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
    let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = soft_margin_loss(&probe.scores(&x).unwrap(), &y).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn separable_toy_problem_trains_below_0_1() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 200;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let centre = if class == 0 { -2.0 } else { 2.0 };
        x.push(centre + rng.gen_range(-0.5..0.5));
        x.push(rng.gen_range(-1.0..1.0));
        y.extend_from_slice(if class == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] });
    }
    let x = Tensor::new(&[n, 2], x).unwrap();
    let y = Tensor::new(&[n, 2], y).unwrap();
    let (_, history) = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert_eq!(history.len(), 100);
    assert!(*history.last().unwrap() < 0.1, "{:?}", history.last());
    assert!(history.last() < history.first());
}

#[test]
fn gradient_of_the_probe_matches_finite_differences() {
    // One plain SGD step (no momentum) from zero equals -lr * dL/dparams.
    let x = Tensor::new(&[3, 2], vec![0.5, -1.0, 1.5, 2.0, -0.3, 0.7]).unwrap();
    let y = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let cfg = ProbeConfig {
        epochs: 1,
        batch_size: 3,
        lr: 1.0,
        momentum: 0.0,
        ..ProbeConfig::default()
    };
    let (probe, _) = train_probe(&x, &y, &cfg).unwrap();
    let h = 1e-6;
    for j in 0..2 {
        for k in 0..2 {
            let mut p = LinearProbe::zeros(2, 2);
            p.weight.data_mut()[j * 2 + k] = h;
            let up = soft_margin_loss(&p.scores(&x).unwrap(), &y).unwrap();
            p.weight.data_mut()[j * 2 + k] = -h;
            let down = soft_margin_loss(&p.scores(&x).unwrap(), &y).unwrap();
            let g = (up - down) / (2.0 * h);
            assert!((probe.weight.data()[j * 2 + k] + g).abs() < 1e-8);
        }
    }
}

#[test]
fn subset_sizes_and_class_coverage() {
    let d = generate_synthetic(2000, 8, 16, 1).unwrap();
    let y = d.label_matrix();
    let sub = stratified_subset(&y, 0.01, 0).unwrap();
    assert_eq!(sub.len(), 20);
    for c in 0..8 {
        let total = (0..2000).filter(|&i| y.data()[i * 8 + c] > 0.5).count();
        let kept = sub.iter().filter(|&&i| y.data()[i * 8 + c] > 0.5).count();
        if total >= 100 {
            assert!(kept >= 1, "class {c} lost");
        }
    }
    assert_eq!(sub, stratified_subset(&y, 0.01, 0).unwrap());
    assert_eq!(stratified_subset(&y, 1e-6, 0).unwrap().len(), 1);
    assert_eq!(stratified_subset(&y, 1.0, 0).unwrap(), (0..2000).collect::<Vec<_>>());
    assert_eq!(stratified_subset(&y, 0.1, 0).unwrap().len(), 200);
    assert!(matches!(stratified_subset(&y, 0.0, 0), Err(Error::Config(_))));
}

#[test]
fn probe_config_validation() {
    ProbeConfig::default().validate().unwrap();
    for bad in [
        ProbeConfig {
            label_fraction: 1.5,
            ..Default::default()
        },
        ProbeConfig {
            epochs: 0,
            ..Default::default()
        },
        ProbeConfig {
            momentum: 1.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn eval_masking_is_the_augment_masking() {
    let d = generate_synthetic(5, 4, 32, 2).unwrap();
    let split = ChannelSplit::new(12, 2);
    assert_eq!(Modality::S1.drop_mode(), DropMode::OpticalDropped);
    assert_eq!(Modality::S2.drop_mode(), DropMode::SarDropped);
    assert_eq!(Modality::S1S2.drop_mode(), DropMode::KeepBoth);
    for m in Modality::ALL {
        let got = prepare_inputs(&d, m, 16).unwrap();
        let mut expected = Vec::new();
        for s in &d.samples {
            let full = CropBox {
                x: 0,
                y: 0,
                w: 32,
                h: 32,
            };
            let mut img = resize_region(&s.pixels, full, 16).unwrap();
            mask_modality(&mut img, m.drop_mode(), &split).unwrap();
            expected.extend_from_slice(img.data());
        }
        assert!(got.bit_eq(&Tensor::new(&[5, 14, 16, 16], expected).unwrap()));
    }
}

#[test]
fn feature_extraction_contracts() {
    let cfg = tiny_vit();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let params = ParameterSet::init(&cfg, 5).unwrap();
    let before = params.clone();
    let mut d = generate_synthetic(6, 4, 16, 3).unwrap();

    let f = extract_features(&vit, &params, &d, Modality::S1, 16, 2).unwrap();
    assert_eq!(f.shape(), &[6, 12]);
    assert!(params.bit_eq(&before));
    assert!(f.bit_eq(&extract_features(&vit, &params, &d, Modality::S1, 16, 1).unwrap()));

    // S1 features ignore the optical channels entirely.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in &mut d.samples {
        for v in &mut s.pixels.data_mut()[..12 * 16 * 16] {
            *v = rng.gen_range(-50.0..50.0);
        }
    }
    assert!(f.bit_eq(&extract_features(&vit, &params, &d, Modality::S1, 16, 1).unwrap()));

    // On an all-zero sample, every modality sees the same input.
    for s in &mut d.samples {
        s.pixels = Tensor::zeros(&[14, 16, 16]);
    }
    let mm = extract_features(&vit, &params, &d, Modality::S1S2, 16, 1).unwrap();
    assert!(mm.bit_eq(&extract_features(&vit, &params, &d, Modality::S1, 16, 1).unwrap()));

    let mut wrong = d.clone();
    wrong.c_sar = 0;
    assert!(matches!(
        extract_features(&vit, &params, &wrong, Modality::S1, 16, 1),
        Err(Error::Config(_) | Error::Shape(_))
    ));
}

#[test]
fn evaluate_is_deterministic_and_fills_the_report() {
    let cfg = tiny_vit();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let params = ParameterSet::init(&cfg, 0).unwrap();
    let all = generate_synthetic(120, 8, 16, 6).unwrap();
    let (train, test) = all.split_tail(40).unwrap();
    let mut report = Report::new(&Modality::ALL, &[1.0, 0.01]);
    let mut row = Vec::new();
    for &(m, f) in &report.columns.clone() {
        let pc = ProbeConfig {
            epochs: 5,
            modality: m,
            label_fraction: f,
            ..Default::default()
        };
        let r = evaluate(&vit, &params, &train, &test, &pc, 16, 1).unwrap();
        assert_eq!(r, evaluate(&vit, &params, &train, &test, &pc, 16, 2).unwrap());
        assert!((0.0..=1.0).contains(&r.map));
        assert_eq!(r.n_train, if f == 1.0 { 80 } else { 1 });
        row.push(r);
    }
    report.push_row("random", row).unwrap();
    assert!(report.cell("random", Modality::S2, 0.01).is_some());
    let text = report.to_text();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("S1+S2 1%"), "{text}");
    assert!(matches!(report.push_row("short", vec![]), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn map_is_a_unit_interval_permutation_invariant(seed in 0u64..1000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let s: Vec<f64> = (0..n * c).map(|_| rng.gen()).collect();
        let mut y: Vec<f64> = (0..n * c).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        y[0] = 1.0;
        let base = mean_average_precision(&Tensor::new(&[n, c], s.clone()).unwrap(), &Tensor::new(&[n, c], y.clone()).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.map));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let ps: Vec<f64> = perm.iter().flat_map(|&i| s[i * c..(i + 1) * c].to_vec()).collect();
        let py: Vec<f64> = perm.iter().flat_map(|&i| y[i * c..(i + 1) * c].to_vec()).collect();
        let moved = mean_average_precision(&Tensor::new(&[n, c], ps).unwrap(), &Tensor::new(&[n, c], py).unwrap()).unwrap();
        prop_assert!((moved.map - base.map).abs() < 1e-12);
    }
}
