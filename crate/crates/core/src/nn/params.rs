use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Name of the weight-normalized final projection (direction only; gain fixed at 1).
pub const LAST_LAYER: &str = "head.last_layer.weight_v";

/// Named parameter tensors of one network, ordered by path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameter handles bound onto a tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Substitute the handle used for `name`.
    pub fn set(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Error::Contract(format!("missing parameter {name}"))),
        }
    }

    /// Gradients by parameter name; parameters the loss did not reach get zeros.
    pub fn gradients(&self, grads: &mut Gradients, like: &ParameterSet) -> Result<ParameterSet> {
        let mut out = like.zeros_like();
        for (name, g) in out.iter_mut() {
            if let Some(t) = grads.take(self.get(name)?) {
                *g = t;
            }
        }
        Ok(out)
    }
}

fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParameterSet {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self { tensors }
    }

    /// Parameter names and shapes implied by a config.
    pub fn layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.embed_dim;
        let p2c = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let grid = cfg.image_size / cfg.patch_size;
        let hidden = cfg.mlp_hidden();
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![d, p2c]),
            ("patch_embed.bias".into(), vec![d]),
            ("cls_token".into(), vec![1, 1, d]),
            ("pos_embed".into(), vec![1, 1 + grid * grid, d]),
        ];
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.norm1.weight"), vec![d]),
                (format!("{p}.norm1.bias"), vec![d]),
                (format!("{p}.attn.qkv.weight"), vec![3 * d, d]),
                (format!("{p}.attn.qkv.bias"), vec![3 * d]),
                (format!("{p}.attn.proj.weight"), vec![d, d]),
                (format!("{p}.attn.proj.bias"), vec![d]),
                (format!("{p}.norm2.weight"), vec![d]),
                (format!("{p}.norm2.bias"), vec![d]),
                (format!("{p}.mlp.fc1.weight"), vec![hidden, d]),
                (format!("{p}.mlp.fc1.bias"), vec![hidden]),
                (format!("{p}.mlp.fc2.weight"), vec![d, hidden]),
                (format!("{p}.mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("norm.weight".into(), vec![d]));
        out.push(("norm.bias".into(), vec![d]));
        for (j, (fan_in, fan_out)) in cfg.head_dims().into_iter().enumerate() {
            out.push((format!("head.mlp.{j}.weight"), vec![fan_out, fan_in]));
            out.push((format!("head.mlp.{j}.bias"), vec![fan_out]));
        }
        out.push((LAST_LAYER.into(), vec![cfg.out_dim, cfg.head_bottleneck_dim]));
        out
    }

    /// Truncated-normal (std 0.02) weights, zero biases, unit norm gains,
    /// zero position embeddings and classification token.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(cfg) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
                vec![1.0; n]
            } else if name.ends_with(".weight") || name == LAST_LAYER {
                let mut r = rng::stream(seed, domain::PARAMS, rng::hash_str(&name), 0);
                (0..n).map(|_| trunc_normal(&mut r, 0.02)).collect()
            } else {
                vec![0.0; n]
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.same_layout(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Put every parameter on the tape, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &ParameterSet) -> f64 {
        self.tensors
            .values()
            .zip(other.tensors.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    /// Row-normalized final projection actually applied in the forward pass.
    pub fn effective_last_layer(&self) -> Result<Tensor> {
        let v = self.get(LAST_LAYER)?;
        let cols = v.shape()[1];
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(super::NORM_EPS);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Tensor::new(v.shape(), data)
    }
}
