//! A short pretraining run with a checkpoint, a resume, and the metrics stream.
//!
//! cargo run --example pretrain -- [epochs] [samples]

use dinomm::augment::AugConfig;
use dinomm::data::{self, SynthConfig};
use dinomm::nn::ViTConfig;
use dinomm::trainer::{Checkpoint, RunConfigs, TrainConfig, Trainer};

fn main() -> dinomm::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let epochs = args.next().unwrap_or(3);
    let n = args.next().unwrap_or(256);

    let (train, _) = data::normalize(data::generate(&SynthConfig {
        n,
        ..SynthConfig::default()
    })?)?;
    let configs = RunConfigs {
        vit: ViTConfig::desk(),
        aug: AugConfig::default(),
        train: TrainConfig {
            epochs,
            warmup_epochs: 1,
            tau_t_warmup_epochs: epochs.div_ceil(3),
            ..TrainConfig::desk()
        },
        n_samples: train.len(),
    };
    let mut trainer = Trainer::new(&train, configs.clone())?;
    let half = trainer.total_steps() / 2;
    trainer.run(Some(half), |m| {
        println!("{}", serde_json::to_string(m).expect("metrics serialize"));
    })?;

    let path = std::env::temp_dir().join("dinomm-example.dmmc");
    trainer.checkpoint().save(&path)?;
    println!("saved step {} to {}", trainer.step, path.display());

    let mut resumed = Trainer::resume(&train, configs, Checkpoint::load(&path)?)?;
    let rest = resumed.run(None, |m| {
        println!("{}", serde_json::to_string(m).expect("metrics serialize"));
    })?;
    let last = rest.last().expect("at least one step after resume");
    println!(
        "finished at step {} with teacher entropy {:.3}",
        resumed.step, last.teacher_entropy
    );
    Ok(())
}
