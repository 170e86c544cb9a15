//! Vision-transformer encoder `f` and projection head `h`, with `g = h ∘ f`.

mod params;
mod vit;

pub use params::{BoundParams, ParameterSet, LAST_LAYER};
pub use vit::{interpolate_pos_embed, patchify, resize_matrix, unpatchify, VisionTransformer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const NORM_EPS: f64 = 1e-12;
pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Side of the square input the position embeddings are sized for.
    pub image_size: usize,
    pub patch_size: usize,
    /// Optical plus SAR channel count.
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub head_hidden_dim: usize,
    /// Width of the l2-normalized vector fed to the weight-normalized layer.
    pub head_bottleneck_dim: usize,
    /// Linear layers in the head MLP (GELU between them).
    pub head_layers: usize,
    /// K, the number of output logits.
    pub out_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            in_channels: 14,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            head_layers: 3,
            out_dim: 256,
        }
    }

    /// ViT-S/8 with the full-size head on 120-pixel patches.
    pub fn vit_small_8() -> Self {
        Self {
            image_size: 120,
            patch_size: 8,
            in_channels: 14,
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            mlp_ratio: 4.0,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            head_layers: 3,
            out_dim: 65_536,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.head_layers < 1 {
            return bad("head_layers must be >= 1".into());
        }
        if self.out_dim < 2 {
            return bad(format!("out_dim must be >= 2, got {}", self.out_dim));
        }
        if self.in_channels == 0 || self.head_bottleneck_dim == 0 || self.mlp_hidden() == 0 {
            return bad("channel and layer widths must be positive".into());
        }
        if self.head_layers > 1 && self.head_hidden_dim == 0 {
            return bad("head_hidden_dim must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// `(fan_in, fan_out)` of each head MLP layer.
    pub fn head_dims(&self) -> Vec<(usize, usize)> {
        (0..self.head_layers)
            .map(|j| {
                let fan_in = if j == 0 { self.embed_dim } else { self.head_hidden_dim };
                let fan_out = if j + 1 == self.head_layers {
                    self.head_bottleneck_dim
                } else {
                    self.head_hidden_dim
                };
                (fan_in, fan_out)
            })
            .collect()
    }
}
