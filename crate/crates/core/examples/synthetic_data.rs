//! Synthetic paired SAR/optical scenes: generation, file round trip, normalization.
//!
//! cargo run --example synthetic_data

use dinomm::data::{self, SynthConfig};

fn main() -> dinomm::Result<()> {
    let cfg = SynthConfig {
        n: 200,
        ..SynthConfig::default()
    };
    let ds = data::generate(&cfg)?;
    println!(
        "{} samples, {} optical + {} SAR channels, {}x{}, {} classes",
        ds.len(),
        ds.c_optical,
        ds.c_sar,
        ds.height,
        ds.width,
        ds.num_classes
    );
    let counts: Vec<usize> = (0..ds.num_classes)
        .map(|c| ds.samples.iter().filter(|s| s.labels[c] == 1).count())
        .collect();
    println!("positives per class: {counts:?}");

    let dir = std::env::temp_dir().join("dinomm-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scenes.dmm");
    data::save(&ds, &path)?;
    let back = data::load(&path)?;
    println!("round trip through {} identical: {}", path.display(), back == ds);

    let (train, test) = back.split_tail(50)?;
    let (train, stats) = data::normalize(train)?;
    let mut test = test;
    stats.apply(&mut test)?;
    println!("channel means {:.3?}", &stats.mean[..4]);
    println!("train {} / test {} after normalization", train.len(), test.len());
    Ok(())
}
