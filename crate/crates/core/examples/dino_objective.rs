//! Teacher centering and sharpening, the multi-crop loss, and the two EMAs.
//!
//! cargo run --example dino_objective

use dinomm::dino::{self, Center};
use dinomm::nn::{ParameterSet, ViTConfig, VisionTransformer};
use dinomm::{Tape, Tensor};

fn main() -> dinomm::Result<()> {
    let cfg = ViTConfig {
        out_dim: 16,
        ..ViTConfig::desk()
    };
    let vit = VisionTransformer::new(cfg.clone())?;
    let student = ParameterSet::init(&cfg, 1)?;
    // Stand-in for a teacher that has drifted from the student.
    let mut teacher = ParameterSet::init(&cfg, 2)?;
    let center = Center::zeros(cfg.out_dim, 0.9)?;

    let b = 2;
    let img = |n: usize, side: usize, k: f64| {
        Tensor::new(
            &[n, cfg.in_channels, side, side],
            (0..n * cfg.in_channels * side * side)
                .map(|i| (i as f64 * k).sin())
                .collect(),
        )
    };
    let global = img(2 * b, 32, 0.37)?;
    let local = img(4 * b, 16, 0.11)?;

    let t_logits = vit.forward_tensor(&teacher, &global)?;
    let probs: Vec<Tensor> = (0..2)
        .map(|v| {
            let rows = t_logits.data()[v * b * 16..(v + 1) * b * 16].to_vec();
            dino::teacher_probs(&Tensor::new(&[b, 16], rows)?, &center, 0.04)
        })
        .collect::<dinomm::Result<_>>()?;
    println!(
        "teacher entropy {:.3} nats (ln K = {:.3})",
        dino::mean_entropy(&probs[0]),
        (16f64).ln()
    );
    println!("pairs for 2 global + 4 local views: {}", dino::view_pairs(2, 6).len());

    let mut tape = Tape::new();
    let p = student.bind(&mut tape, true);
    let g = tape.constant(global);
    let l = tape.constant(local);
    let sg = vit.forward(&mut tape, &p, g)?;
    let sl = vit.forward(&mut tape, &p, l)?;
    let s = tape.concat(&[sg, sl], 0)?;
    let loss = dino::dino_loss_stacked(&mut tape, s, 6, &probs, 0.1)?;
    println!("loss {:.4}", tape.value(loss).item()?);

    let center = dino::update_center(&center, &t_logits)?;
    println!("center after one update: |c| = {:.4}", center.c.l2_norm());
    let before = teacher.distance(&student);
    dino::update_teacher(&mut teacher, &student, 0.996)?;
    println!(
        "teacher-student distance {before:.4} -> {:.4} after one EMA step",
        teacher.distance(&student)
    );
    Ok(())
}
