//! Finite-difference suites over the tensor ops, the network, and the full objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dino;
use crate::error::Result;
use crate::nn::{ParameterSet, ViTConfig, VisionTransformer};
use crate::tensor::{GradCase, GradReport, Tensor};

/// Small enough that checking every parameter element is cheap.
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        in_channels: 4,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
        head_hidden_dim: 8,
        head_bottleneck_dim: 4,
        head_layers: 3,
        out_dim: 6,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Parameters with every entry randomized so no path starts at a symmetric point.
fn rand_params(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Result<ParameterSet> {
    let mut p = ParameterSet::init(cfg, rng.gen())?;
    for (_, t) in p.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.3 * rng.gen_range(-1.0..1.0));
    }
    Ok(p)
}

/// Checks of `mean(f(x))` w.r.t. the input, and of the full `g = h∘f`
/// w.r.t. the input and one parameter tensor per kind.
pub fn network_cases(seed: u64) -> Result<Vec<GradCase>> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = rand_params(&cfg, &mut rng)?;
    let vit = VisionTransformer::new(cfg.clone())?;
    let images = rand_tensor(&mut rng, &[1, 4, 8, 8], 1.0);
    let weights = rand_tensor(&mut rng, &[1, cfg.out_dim], 1.0);

    let mut cases = Vec::new();
    {
        let (vit, params) = (vit.clone(), params.clone());
        cases.push(GradCase::new("encode_mean/input", images.clone(), move |t, x| {
            let p = params.bind(t, false);
            let f = vit.encode(t, &p, x)?;
            t.mean(f)
        }));
    }
    {
        let (vit, params, w) = (vit.clone(), params.clone(), weights.clone());
        cases.push(GradCase::new("g/input", images.clone(), move |t, x| {
            let p = params.bind(t, false);
            let g = vit.forward(t, &p, x)?;
            let w = t.constant(w.clone());
            let y = t.mul(g, w)?;
            t.sum(y)
        }));
    }
    for name in [
        "patch_embed.weight",
        "cls_token",
        "pos_embed",
        "blocks.0.attn.qkv.weight",
        "blocks.0.norm2.weight",
        "blocks.0.mlp.fc1.bias",
        "norm.bias",
        "head.mlp.1.weight",
        crate::nn::LAST_LAYER,
    ] {
        let (vit, params, w, img) = (vit.clone(), params.clone(), weights.clone(), images.clone());
        let key = name.to_string();
        cases.push(GradCase::new(
            format!("g/{name}"),
            params.get(name)?.clone(),
            move |t, x| {
                let mut p = params.bind(t, false);
                p.set(&key, x)?;
                let img = t.constant(img.clone());
                let g = vit.forward(t, &p, img)?;
                let w = t.constant(w.clone());
                let y = t.mul(g, w)?;
                t.sum(y)
            },
        ));
    }
    Ok(cases)
}

/// The multi-crop objective through the student network: 2 global 8x8 and
/// 2 local 4x4 views, teacher targets fixed.
pub fn composite_cases(seed: u64) -> Result<Vec<GradCase>> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = rand_params(&cfg, &mut rng)?;
    let vit = VisionTransformer::new(cfg.clone())?;
    let b = 2;
    let global = rand_tensor(&mut rng, &[2 * b, 4, 8, 8], 1.0);
    let local = rand_tensor(&mut rng, &[2 * b, 4, 4, 4], 1.0);
    let center = dino::Center::new(rand_tensor(&mut rng, &[cfg.out_dim], 0.2), 0.9)?;
    let teacher = (0..2)
        .map(|_| dino::teacher_probs(&rand_tensor(&mut rng, &[b, cfg.out_dim], 1.0), &center, 0.5))
        .collect::<Result<Vec<_>>>()?;
    // Temperatures kept moderate so central differences stay well conditioned.
    let tau_s = 0.7;

    let loss =
        move |t: &mut crate::tensor::Tape, p: &crate::nn::BoundParams, g: crate::tensor::Var, l: crate::tensor::Var| {
            let sg = vit.forward(t, p, g)?;
            let sl = vit.forward(t, p, l)?;
            let s = t.concat(&[sg, sl], 0)?;
            dino::dino_loss_stacked(t, s, 4, &teacher, tau_s)
        };
    let loss = std::sync::Arc::new(loss);
    let mut cases = Vec::new();
    {
        let (loss, params, local) = (loss.clone(), params.clone(), local.clone());
        cases.push(GradCase::new("dino_loss/global_views", global.clone(), move |t, x| {
            let p = params.bind(t, false);
            let l = t.constant(local.clone());
            loss(t, &p, x, l)
        }));
    }
    for name in [
        "patch_embed.weight",
        "blocks.0.attn.proj.weight",
        "head.mlp.0.weight",
        crate::nn::LAST_LAYER,
    ] {
        let (loss, params, global, local) = (loss.clone(), params.clone(), global.clone(), local.clone());
        let key = name.to_string();
        cases.push(GradCase::new(
            format!("dino_loss/{name}"),
            params.get(name)?.clone(),
            move |t, x| {
                let mut p = params.bind(t, false);
                p.set(&key, x)?;
                let g = t.constant(global.clone());
                let l = t.constant(local.clone());
                loss(t, &p, g, l)
            },
        ));
    }
    Ok(cases)
}

/// Ops, network, and composite checks for one seed.
pub fn full_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = GradCase::op_suite(seed);
    cases.extend(network_cases(seed)?);
    cases.extend(composite_cases(seed)?);
    Ok(cases)
}

/// Run `cases`, returning each report.
pub fn run_all(cases: &[GradCase], step: f64) -> Result<Vec<GradReport>> {
    cases.iter().map(|c| c.run(step)).collect()
}
