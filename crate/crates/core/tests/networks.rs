use dinomm::checks::{network_cases, tiny_config};
use dinomm::nn::{interpolate_pos_embed, patchify, unpatchify, ParameterSet, ViTConfig, VisionTransformer, LAST_LAYER};
use dinomm::trainer::{adamw_step, decays, AdamState, AdamW};
use dinomm::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = ViTConfig::desk();
    let a = ParameterSet::init(&cfg, 3).unwrap();
    let b = ParameterSet::init(&cfg, 3).unwrap();
    let c = ParameterSet::init(&cfg, 4).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
}

#[test]
fn key_set_follows_config() {
    let cfg = ViTConfig::desk();
    let p = ParameterSet::init(&cfg, 0).unwrap();
    let mut expected = vec![
        ("patch_embed.weight".to_string(), vec![64, 14 * 64]),
        ("patch_embed.bias".into(), vec![64]),
        ("cls_token".into(), vec![1, 1, 64]),
        ("pos_embed".into(), vec![1, 17, 64]),
        ("norm.weight".into(), vec![64]),
        ("norm.bias".into(), vec![64]),
        (LAST_LAYER.into(), vec![256, 64]),
    ];
    for i in 0..2 {
        for (k, s) in [
            ("norm1.weight", vec![64]),
            ("norm1.bias", vec![64]),
            ("attn.qkv.weight", vec![192, 64]),
            ("attn.qkv.bias", vec![192]),
            ("attn.proj.weight", vec![64, 64]),
            ("attn.proj.bias", vec![64]),
            ("norm2.weight", vec![64]),
            ("norm2.bias", vec![64]),
            ("mlp.fc1.weight", vec![256, 64]),
            ("mlp.fc1.bias", vec![256]),
            ("mlp.fc2.weight", vec![64, 256]),
            ("mlp.fc2.bias", vec![64]),
        ] {
            expected.push((format!("blocks.{i}.{k}"), s));
        }
    }
    for (j, (i, o)) in [(64, 128), (128, 128), (128, 64)].into_iter().enumerate() {
        expected.push((format!("head.mlp.{j}.weight"), vec![o, i]));
        expected.push((format!("head.mlp.{j}.bias"), vec![o]));
    }
    expected.sort();
    let got: Vec<(String, Vec<usize>)> = p.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
    assert_eq!(got, expected);
}

#[test]
fn init_statistics() {
    let p = ParameterSet::init(&ViTConfig::desk(), 1).unwrap();
    assert!(p.get("pos_embed").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p.get("cls_token").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p
        .get("blocks.0.attn.qkv.bias")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(p.get("norm.weight").unwrap().data().iter().all(|&v| v == 1.0));
    let w = p.get("blocks.1.mlp.fc1.weight").unwrap();
    let n = w.numel() as f64;
    let mean = w.sum() / n;
    let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // Truncation at two standard deviations shrinks the spread to about 0.88 of 0.02.
    assert!((sd - 0.0176).abs() < 0.001, "sd {sd}");
    assert!(w.data().iter().all(|v| v.abs() <= 0.04));
}

#[test]
fn indivisible_image_size_is_a_config_error() {
    let cfg = ViTConfig {
        image_size: 33,
        ..ViTConfig::desk()
    };
    assert!(matches!(ParameterSet::init(&cfg, 0), Err(Error::Config(_))));
    assert!(matches!(VisionTransformer::new(cfg), Err(Error::Config(_))));
}

#[test]
fn patchify_order_and_shapes() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = patchify(&x, 1).unwrap();
    assert_eq!(p.shape(), &[1, 4, 1]);
    assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = rand_tensor(&[2, 14, 64, 64], 5);
    let p = patchify(&x, 8).unwrap();
    assert_eq!(p.shape(), &[2, 64, 896]);
    let back = unpatchify(&p, 14, 8, (8, 8)).unwrap();
    assert!(back.bit_eq(&x));

    assert!(matches!(
        patchify(&Tensor::zeros(&[1, 1, 6, 6]), 4),
        Err(Error::Shape(_))
    ));
}

#[test]
fn patch_is_channel_major() {
    // Two channels, one 2x2 patch: channel 0 values first, then channel 1.
    let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
    let p = patchify(&x, 2).unwrap();
    assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
}

#[test]
fn zero_images_give_identical_patch_tokens() {
    let cfg = ViTConfig::desk();
    let p = ParameterSet::init(&cfg, 0).unwrap();
    let zeros = Tensor::zeros(&[1, 14, 32, 32]);
    let patches = patchify(&zeros, 8).unwrap();
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let x = tape.constant(patches);
    let tok = tape
        .linear(
            x,
            bp.get("patch_embed.weight").unwrap(),
            Some(bp.get("patch_embed.bias").unwrap()),
        )
        .unwrap();
    let rows: Vec<&[f64]> = tape.value(tok).data().chunks(64).collect();
    assert!(rows.iter().all(|r| *r == rows[0]));
}

#[test]
fn encode_shape_and_channel_check() {
    let cfg = ViTConfig::desk();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let p = ParameterSet::init(&cfg, 0).unwrap();
    let out = vit.encode_tensor(&p, &rand_tensor(&[2, 14, 32, 32], 1)).unwrap();
    assert_eq!(out.shape(), &[2, 64]);
    let err = vit.encode_tensor(&p, &rand_tensor(&[2, 13, 32, 32], 1)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn encode_accepts_any_divisible_square_size() {
    let cfg = ViTConfig::desk();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let p = ParameterSet::init(&cfg, 2).unwrap();
    for s in [8, 16, 24, 32, 48] {
        let out = vit.forward_tensor(&p, &rand_tensor(&[1, 14, s, s], s as u64)).unwrap();
        assert_eq!(out.shape(), &[1, 256]);
        assert!(out.is_finite());
    }
}

#[test]
fn encode_is_batch_permutation_consistent() {
    let cfg = ViTConfig::desk();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let p = ParameterSet::init(&cfg, 7).unwrap();
    let x = rand_tensor(&[3, 14, 16, 16], 8);
    let per = 14 * 16 * 16;
    let perm = [2, 0, 1];
    let xp = Tensor::new(
        &[3, 14, 16, 16],
        perm.iter()
            .flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec())
            .collect(),
    )
    .unwrap();
    let a = vit.encode_tensor(&p, &x).unwrap();
    let b = vit.encode_tensor(&p, &xp).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(&b.data()[row * 64..(row + 1) * 64], &a.data()[src * 64..(src + 1) * 64]);
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..2 {
        for case in network_cases(seed).unwrap() {
            let r = case.run(1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn interpolation_examples() {
    let pos = rand_tensor(&[1, 17, 5], 3);
    assert!(interpolate_pos_embed(&pos, 4).unwrap().bit_eq(&pos));

    let mut data = vec![9.0; 4];
    data.extend(std::iter::repeat(2.5).take(16 * 4));
    let constant = Tensor::new(&[1, 17, 4], data).unwrap();
    for g in [1, 2, 3, 7] {
        let out = interpolate_pos_embed(&constant, g).unwrap();
        assert_eq!(out.shape(), &[1, 1 + g * g, 4]);
        assert_eq!(&out.data()[..4], &[9.0; 4]);
        assert!(out.data()[4..].iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    let grid = Tensor::new(&[1, 5, 1], vec![-1.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = interpolate_pos_embed(&grid, 3).unwrap();
    assert_eq!(up.data()[0], -1.0);
    assert!((up.data()[1 + 4] - 1.5).abs() < 1e-12);
}

#[test]
fn bottleneck_normalization_and_head_shape() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[1, 4], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    let n = tape.l2_normalize(v, 1e-12).unwrap();
    assert!((tape.value(n).l2_norm() - 1.0).abs() < 1e-15);

    let cfg = ViTConfig::desk();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let p = ParameterSet::init(&cfg, 0).unwrap();
    let out = vit.forward_tensor(&p, &rand_tensor(&[3, 14, 32, 32], 2)).unwrap();
    assert_eq!(out.shape(), &[3, 256]);
    // Unit bottleneck times unit rows bounds every logit by 1.
    assert!(out.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
}

#[test]
fn single_layer_head_is_scale_invariant() {
    let cfg = ViTConfig {
        head_layers: 1,
        ..ViTConfig::desk()
    };
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let p = ParameterSet::init(&cfg, 1).unwrap();
    let rep = rand_tensor(&[2, 64], 4);
    let logits = |scale: f64| {
        let mut tape = Tape::new();
        let bp = p.bind(&mut tape, false);
        let r = tape.constant(rep.map(|v| v * scale));
        let out = vit.project(&mut tape, &bp, r).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (logits(1.0), logits(10.0));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn effective_last_layer_rows_stay_unit_after_updates() {
    let cfg = tiny_config();
    let vit = VisionTransformer::new(cfg.clone()).unwrap();
    let mut params = ParameterSet::init(&cfg, 0).unwrap();
    let mut state = AdamState::new(&params);
    let x = rand_tensor(&[2, 4, 8, 8], 9);
    let w = rand_tensor(&[2, cfg.out_dim], 10);
    for _ in 0..5 {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let g = vit.forward(&mut tape, &bp, xv).unwrap();
        let wv = tape.constant(w.clone());
        let y = tape.mul(g, wv).unwrap();
        let loss = tape.sum(y).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let grads = bp.gradients(&mut grads, &params).unwrap();
        let hp = AdamW {
            lr: 0.05,
            weight_decay: 0.04,
            betas: (0.9, 0.999),
            eps: 1e-8,
        };
        adamw_step(&mut params, &grads, &mut state, &hp, decays).unwrap();
        let eff = params.effective_last_layer().unwrap();
        for row in eff.data().chunks(cfg.head_bottleneck_dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
