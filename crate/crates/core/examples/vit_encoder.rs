//! Tiny ViT: parameter layout, CLS features, projection head, and inputs of another size.
//!
//! cargo run --example vit_encoder

use dinomm::nn::{ParameterSet, ViTConfig, VisionTransformer};
use dinomm::Tensor;

fn main() -> dinomm::Result<()> {
    let cfg = ViTConfig::desk();
    let params = ParameterSet::init(&cfg, 0)?;
    println!("{} tensors, {} parameters", params.len(), params.numel());
    for (name, t) in params.iter().take(6) {
        println!("  {name:<28} {:?}", t.shape());
    }

    let vit = VisionTransformer::new(cfg.clone())?;
    let images = Tensor::new(
        &[2, cfg.in_channels, 32, 32],
        (0..2 * cfg.in_channels * 32 * 32)
            .map(|i| ((i % 97) as f64 / 48.0) - 1.0)
            .collect(),
    )?;
    let features = vit.encode_tensor(&params, &images)?;
    let logits = vit.forward_tensor(&params, &images)?;
    println!("features {:?}, head logits {:?}", features.shape(), logits.shape());

    // Local crops are smaller; position embeddings are interpolated to the 2x2 grid.
    let small = Tensor::full(&[1, cfg.in_channels, 16, 16], 0.5);
    println!(
        "16x16 input -> features {:?}",
        vit.encode_tensor(&params, &small)?.shape()
    );
    Ok(())
}
