use crate::error::{Error, Result};
use crate::nn::{ParameterSet, LAST_LAYER};
use crate::tensor::Tensor;

/// Adam moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// Parameters that receive weight decay: matrices, except the normalized head direction.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.ndim() >= 2 && name.ends_with(".weight") && name != LAST_LAYER
}

/// One decoupled-weight-decay Adam update. `decay` picks the parameters
/// that are shrunk by `1 - lr·wd` before the Adam step.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    hp: &AdamW,
    decay: impl Fn(&str, &Tensor) -> bool,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Contract(
            "parameters, gradients and moments have different layouts".into(),
        ));
    }
    for (name, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in parameter {name} at flat index {i}",
                g.data()[i]
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = hp.betas;
    let bc1 = 1.0 - b1.powf(state.t as f64);
    let bc2 = 1.0 - b2.powf(state.t as f64);
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((name, p), (_, g)), ((_, m), (_, v))) in iter {
        let shrink = if decay(name, p) {
            1.0 - hp.lr * hp.weight_decay
        } else {
            1.0
        };
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * shrink - hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
