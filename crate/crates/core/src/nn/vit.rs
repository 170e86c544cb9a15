use super::{BoundParams, ParameterSet, ViTConfig, LAST_LAYER, LN_EPS, NORM_EPS};
use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Bilinear (half-pixel centred) 1-D resampling weights, shape `[dst, src]`.
pub fn resize_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[i * src + i0] += 1.0 - frac;
        m[i * src + i1] += frac;
    }
    m
}

/// 2-D bilinear weights mapping a `src x src` grid to `dst x dst`, shape `[dst², src²]`.
fn grid_resize_matrix(src: usize, dst: usize) -> Tensor {
    let r = resize_matrix(src, dst);
    let mut data = vec![0.0; dst * dst * src * src];
    for (oy, ox) in (0..dst).flat_map(|y| (0..dst).map(move |x| (y, x))) {
        let row = (oy * dst + ox) * src * src;
        for iy in 0..src {
            let wy = r[oy * src + iy];
            if wy == 0.0 {
                continue;
            }
            for ix in 0..src {
                data[row + iy * src + ix] = wy * r[ox * src + ix];
            }
        }
    }
    Tensor::new(&[dst * dst, src * src], data).expect("sized above")
}

fn square_side(tokens: usize) -> Option<usize> {
    let g = (tokens as f64).sqrt().round() as usize;
    (g * g == tokens).then_some(g)
}

/// Resample the grid slots of `[1, 1 + G², D]` position embeddings to a
/// `target_grid²` grid; the classification slot passes through.
pub fn interpolate_pos_embed(pos: &Tensor, target_grid: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(pos.clone());
    let out = interpolate_on_tape(&mut tape, p, target_grid)?;
    Ok(tape.value(out).clone())
}

fn interpolate_on_tape(tape: &mut Tape, pos: Var, target_grid: usize) -> Result<Var> {
    let shape = tape.shape(pos).to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] < 2 {
        return shape_err(format!("position embeddings must be [1, 1+G², D], got {shape:?}"));
    }
    let d = shape[2];
    let Some(grid) = square_side(shape[1] - 1) else {
        return shape_err(format!("{} grid slots do not form a square", shape[1] - 1));
    };
    if target_grid == 0 {
        return shape_err("target grid must be >= 1");
    }
    if target_grid == grid {
        return Ok(pos);
    }
    let cls = tape.slice(pos, 1, 0, 1)?;
    let slots = tape.slice(pos, 1, 1, shape[1])?;
    let slots = tape.reshape(slots, &[grid * grid, d])?;
    let m = tape.constant(grid_resize_matrix(grid, target_grid));
    let resized = tape.matmul(m, slots)?;
    let resized = tape.reshape(resized, &[1, target_grid * target_grid, d])?;
    tape.concat(&[cls, resized], 1)
}

/// `[B, C, S, S]` images to `[B, N, C·p²]` row-major patches, channel-major inside a patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let out = patchify_on_tape(&mut tape, x, patch)?;
    Ok(tape.value(out).clone())
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, patch: usize, grid: (usize, usize)) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 3 || s[1] != grid.0 * grid.1 || s[2] != channels * patch * patch {
        return shape_err(format!(
            "cannot unpatchify {s:?} into {channels} channels, patch {patch}, grid {grid:?}"
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(patches.clone());
    let x = tape.reshape(x, &[s[0], grid.0, grid.1, channels, patch, patch])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    let x = tape.reshape(x, &[s[0], channels, grid.0 * patch, grid.1 * patch])?;
    Ok(tape.value(x).clone())
}

fn patchify_on_tape(tape: &mut Tape, images: Var, p: usize) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 {
        return shape_err(format!("images must be [B, C, W, H], got {s:?}"));
    }
    if p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return shape_err(format!("image extents {}x{} not divisible by patch {p}", s[2], s[3]));
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
    let x = tape.reshape(images, &[b, c, gh, p, gw, p])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b, gh * gw, c * p * p])
}

/// The encoder and head for one [`ViTConfig`]; parameters are passed per call.
#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub config: ViTConfig,
}

impl VisionTransformer {
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Classification-token representation `f(x)`, shape `[B, embed_dim]`.
    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != cfg.in_channels {
            return shape_err(format!(
                "encoder expects [B, {}, S, S] images, got {s:?}",
                cfg.in_channels
            ));
        }
        if s[2] != s[3] {
            return shape_err(format!("encoder expects square images, got {}x{}", s[2], s[3]));
        }
        let (b, d) = (s[0], cfg.embed_dim);
        let grid = s[2] / cfg.patch_size;

        let patches = patchify_on_tape(tape, images, cfg.patch_size)?;
        let tokens = tape.linear(patches, p.get("patch_embed.weight")?, Some(p.get("patch_embed.bias")?))?;
        let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
        let cls = tape.add(zeros, p.get("cls_token")?)?;
        let x = tape.concat(&[cls, tokens], 1)?;
        let pos = interpolate_on_tape(tape, p.get("pos_embed")?, grid)?;
        let mut x = tape.add(x, pos)?;

        for i in 0..cfg.depth {
            x = self.block(tape, p, &format!("blocks.{i}"), x)?;
        }
        let x = tape.layer_norm(x, p.get("norm.weight")?, p.get("norm.bias")?, LN_EPS)?;
        let cls = tape.slice(x, 1, 0, 1)?;
        tape.reshape(cls, &[b, d])
    }

    fn block(&self, tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let w = |k: &str| p.get(&format!("{name}.{k}"));
        let h = tape.layer_norm(x, w("norm1.weight")?, w("norm1.bias")?, LN_EPS)?;
        let a = self.attention(tape, p, name, h)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, w("norm2.weight")?, w("norm2.bias")?, LN_EPS)?;
        let h = tape.linear(h, w("mlp.fc1.weight")?, Some(w("mlp.fc1.bias")?))?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, w("mlp.fc2.weight")?, Some(w("mlp.fc2.bias")?))?;
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let heads = self.config.num_heads;
        let dh = d / heads;
        let w = |k: &str| p.get(&format!("{name}.attn.{k}"));
        let qkv = tape.linear(x, w("qkv.weight")?, Some(w("qkv.bias")?))?;
        let qkv = tape.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let sl = tape.slice(qkv, 0, i, i + 1)?;
            *part = tape.reshape(sl, &[b, heads, t, dh])?;
        }
        let [q, k, v] = parts;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let attn = tape.softmax(scores, (dh as f64).sqrt())?;
        let out = tape.matmul(attn, v)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, d])?;
        tape.linear(out, w("proj.weight")?, Some(w("proj.bias")?))
    }

    /// Head `h`: MLP, l2-normalized bottleneck, weight-normalized projection to K logits.
    pub fn project(&self, tape: &mut Tape, p: &BoundParams, rep: Var) -> Result<Var> {
        let n = self.config.head_layers;
        let mut h = rep;
        for j in 0..n {
            h = tape.linear(
                h,
                p.get(&format!("head.mlp.{j}.weight"))?,
                Some(p.get(&format!("head.mlp.{j}.bias"))?),
            )?;
            if j + 1 < n {
                h = tape.gelu(h)?;
            }
        }
        let h = tape.l2_normalize(h, NORM_EPS)?;
        let w = tape.l2_normalize(p.get(LAST_LAYER)?, NORM_EPS)?;
        tape.linear(h, w, None)
    }

    /// `g(x) = h(f(x))`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Var> {
        let rep = self.encode(tape, p, images)?;
        self.project(tape, p, rep)
    }

    /// Gradient-free encoding of a batch.
    pub fn encode_tensor(&self, params: &ParameterSet, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.encode(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }

    /// Gradient-free `g(x)`.
    pub fn forward_tensor(&self, params: &ParameterSet, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }
}
