use std::collections::BTreeSet;

use dinomm::data::{self, batch_indices, generate, generate_synthetic, normalize, ChannelStats, Dataset, SynthConfig};
use dinomm::eval::{probe_features, raw_features, Modality, ProbeConfig};
use dinomm::{Error, Tensor};

fn small() -> Dataset {
    generate_synthetic(24, 8, 16, 5).unwrap()
}

#[test]
fn every_sample_has_a_label() {
    let d = generate_synthetic(100, 8, 16, 1).unwrap();
    assert_eq!(d.len(), 100);
    assert!(d.samples.iter().all(|s| s.labels.iter().any(|&l| l == 1)));
    assert!(d
        .samples
        .iter()
        .all(|s| s.labels.len() == 8 && s.labels.iter().all(|&l| l <= 1)));
    assert!(d.samples.iter().all(|s| s.pixels.shape() == [14, 16, 16]));
    let ids: Vec<u64> = d.samples.iter().map(|s| s.id).collect();
    assert_eq!(ids, (0..100).collect::<Vec<_>>());
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(20, 8, 16, 7).unwrap();
    let b = generate_synthetic(20, 8, 16, 7).unwrap();
    let c = generate_synthetic(20, 8, 16, 8).unwrap();
    assert_eq!(data::to_bytes(&a).unwrap(), data::to_bytes(&b).unwrap());
    assert_ne!(a, c);
}

#[test]
fn sample_depends_only_on_its_index() {
    let a = generate_synthetic(10, 8, 16, 3).unwrap();
    let b = generate_synthetic(30, 8, 16, 3).unwrap();
    assert_eq!(a.samples[..], b.samples[..10]);
}

#[test]
fn invalid_generation_args() {
    assert!(matches!(generate_synthetic(4, 8, 16, 0), Err(Error::Config(_))));
    assert!(matches!(generate_synthetic(10, 0, 16, 0), Err(Error::Config(_))));
    assert!(matches!(generate_synthetic(10, 8, 15, 0), Err(Error::Config(_))));
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let d = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dmm");
    data::save(&d, &path).unwrap();
    let back = data::load(&path).unwrap();
    assert_eq!(back, d);
    for (a, b) in back.samples.iter().zip(&d.samples) {
        assert!(a.pixels.bit_eq(&b.pixels));
    }
}

#[test]
fn corrupt_containers_are_rejected() {
    let bytes = data::to_bytes(&small()).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let err = data::from_bytes(&bad_magic).unwrap_err();
    assert!(matches!(&err, Error::Format(m) if m == "bad magic"), "{err}");

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(data::from_bytes(&bad_version), Err(Error::Format(m)) if m.contains("version")));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = data::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(&err, Error::Format(m) if m.contains("truncated")),
            "{cut}: {err}"
        );
    }

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(data::from_bytes(&flipped), Err(Error::Format(m)) if m.contains("crc")));

    let mut bad_crc = bytes.clone();
    let last = bad_crc.len() - 1;
    bad_crc[last] ^= 0xff;
    assert!(matches!(data::from_bytes(&bad_crc), Err(Error::Format(m)) if m.contains("crc")));
}

#[test]
fn header_fields_follow_the_layout() {
    let d = small();
    let b = data::to_bytes(&d).unwrap();
    assert_eq!(&b[..4], b"DMM1");
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    assert_eq!(u16_at(4), 1);
    assert_eq!(u16_at(6), 8);
    assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 24);
    assert_eq!((u16_at(12), u16_at(14), u16_at(16), u16_at(18)), (14, 12, 16, 16));
    assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 0);
    let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
}

#[test]
fn normalization() {
    let (d, stats) = normalize(small()).unwrap();
    let again = ChannelStats::compute(&d).unwrap();
    for (m, s) in again.mean.iter().zip(&again.std) {
        assert!(m.abs() < 1e-10);
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert_eq!(stats.mean.len(), 14);

    let mut constant = small();
    for s in &mut constant.samples {
        s.pixels.data_mut()[..16 * 16].fill(4.0);
    }
    let (n, stats) = normalize(constant).unwrap();
    assert_eq!(stats.std[0], 1.0);
    assert!(n
        .samples
        .iter()
        .all(|s| s.pixels.data()[..256].iter().all(|&v| v == 0.0)));
}

#[test]
fn eval_split_uses_train_statistics() {
    let all = generate_synthetic(40, 8, 16, 2).unwrap();
    let (train, mut test) = all.split_tail(10).unwrap();
    for s in &mut test.samples {
        s.pixels = s.pixels.map(|v| v + 100.0);
    }
    let (_, stats) = normalize(train).unwrap();
    let own = ChannelStats::compute(&test).unwrap();
    stats.apply(&mut test).unwrap();
    let after = ChannelStats::compute(&test).unwrap();
    // Train statistics leave the injected shift in place; the split's own would remove it.
    for ch in 0..14 {
        assert!(after.mean[ch] > 10.0);
        assert!((after.mean[ch] - (own.mean[ch] - stats.mean[ch]) / stats.std[ch]).abs() < 1e-9);
    }
}

#[test]
fn batching() {
    let sizes: Vec<usize> = batch_indices(10, 3, 0, 0).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![3, 3, 3, 1]);
    let e0 = batch_indices(50, 8, 1, 0).unwrap();
    let e1 = batch_indices(50, 8, 1, 1).unwrap();
    assert_ne!(e0, e1);
    assert_eq!(e0, batch_indices(50, 8, 1, 0).unwrap());
    let all: BTreeSet<usize> = e1.iter().flatten().copied().collect();
    assert_eq!(all, (0..50).collect());
    assert_eq!(e1.iter().map(Vec::len).sum::<usize>(), 50);

    let d = small();
    let ids: BTreeSet<u64> = d.batches(5, 3, 2).unwrap().iter().flatten().map(|s| s.id).collect();
    assert_eq!(ids, d.samples.iter().map(|s| s.id).collect());
}

fn raw_probe_map(train: &Dataset, test: &Dataset, m: Modality) -> f64 {
    let cfg = ProbeConfig {
        modality: m,
        ..ProbeConfig::default()
    };
    let tx = raw_features(train, m, 16).unwrap();
    let vx = raw_features(test, m, 16).unwrap();
    probe_features(&tx, &train.label_matrix(), &vx, &test.label_matrix(), &cfg)
        .unwrap()
        .map
}

fn positive_rate(labels: &Tensor) -> f64 {
    let k = labels.shape()[1];
    let n = labels.shape()[0] as f64;
    (0..k)
        .map(|c| labels.data().iter().skip(c).step_by(k).sum::<f64>() / n)
        .sum::<f64>()
        / k as f64
}

#[test]
fn each_modality_carries_class_signal() {
    let all = generate(&SynthConfig {
        n: 1300,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train, test) = all.split_tail(300).unwrap();
    let (train, stats) = normalize(train).unwrap();
    let mut test = test;
    stats.apply(&mut test).unwrap();
    let baseline = positive_rate(&test.label_matrix());

    let optical = raw_probe_map(&train, &test, Modality::S2);
    assert!(optical > 0.5, "optical raw-pixel mAP {optical}");
    let sar = raw_probe_map(&train, &test, Modality::S1);
    assert!(sar > baseline + 0.02, "SAR raw-pixel mAP {sar} vs baseline {baseline}");
    assert!(optical > baseline + 0.02);
}
