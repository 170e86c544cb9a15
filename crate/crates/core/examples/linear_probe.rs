//! Linear-probe grid over modalities and label fractions for a random-init encoder.
//!
//! cargo run --example linear_probe

use dinomm::data::{self, SynthConfig};
use dinomm::eval::{evaluate, Modality, ProbeConfig, Report};
use dinomm::nn::{ParameterSet, ViTConfig, VisionTransformer};

fn main() -> dinomm::Result<()> {
    let all = data::generate(&SynthConfig {
        n: 600,
        ..SynthConfig::default()
    })?;
    let (train, mut test) = all.split_tail(200)?;
    let (train, stats) = data::normalize(train)?;
    stats.apply(&mut test)?;

    let cfg = ViTConfig::desk();
    let vit = VisionTransformer::new(cfg.clone())?;
    let params = ParameterSet::init(&cfg, 0)?;

    let fractions = [1.0, 0.05];
    let mut report = Report::new(&Modality::ALL, &fractions);
    let mut row = Vec::new();
    for &(modality, label_fraction) in &report.columns {
        let pc = ProbeConfig {
            modality,
            label_fraction,
            ..ProbeConfig::default()
        };
        row.push(evaluate(&vit, &params, &train, &test, &pc, 32, 2)?);
    }
    report.push_row("random", row)?;
    print!("{}", report.to_text());
    Ok(())
}
