//! Multi-crop views with photometric jitter and random sensor drop.
//!
//! cargo run --example multicrop_views

use dinomm::augment::{make_view_batch, make_views, view_rng, AugConfig};
use dinomm::data::generate_synthetic;

fn main() -> dinomm::Result<()> {
    let ds = generate_synthetic(16, 8, 64, 1)?;
    let cfg = AugConfig::default();
    let views = make_views(&ds.samples[0], &cfg, &mut view_rng(0, 0, ds.samples[0].id))?;
    for (i, v) in views.iter().enumerate() {
        println!(
            "view {i}: {} {:?} crop ({},{}) {}x{} mode {} flipped {} steps {}",
            if v.is_global { "global" } else { "local " },
            v.image.shape(),
            v.crop.x,
            v.crop.y,
            v.crop.w,
            v.crop.h,
            v.drop_mode.letter(),
            v.flipped,
            v.steps.len()
        );
    }

    let samples: Vec<_> = ds.samples.iter().collect();
    let batch = make_view_batch(&samples, &cfg, 0, 0, 4)?;
    println!(
        "batch: global {:?}, local {:?}",
        batch.global.shape(),
        batch.local.shape()
    );
    let letters: String = batch.modes.iter().flatten().map(|m| m.letter()).collect();
    println!("drop modes (M keep both, O optical only, S SAR only): {letters}");
    Ok(())
}
