use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate reached at the end of warmup.
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub center_momentum: f64,
    pub teacher_momentum_start: f64,
    pub teacher_momentum_end: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 20 epochs at batch 32.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: 5e-4,
            warmup_epochs: 2,
            final_lr: 1e-6,
            weight_decay: 0.04,
            betas: (0.9, 0.999),
            eps: 1e-8,
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 6,
            center_momentum: 0.9,
            teacher_momentum_start: 0.996,
            teacher_momentum_end: 1.0,
            seed: 0,
        }
    }

    /// 100 epochs at batch 256 with a 10-epoch learning-rate warmup and a 30-epoch τ_t warmup.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            warmup_epochs: 10,
            tau_t_warmup_epochs: 30,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        for (n, v) in [
            ("base_lr", self.base_lr),
            ("final_lr", self.final_lr),
            ("eps", self.eps),
            ("tau_s", self.tau_s),
            ("tau_t_start", self.tau_t_start),
            ("tau_t_end", self.tau_t_end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{n} = {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.tau_t_end >= self.tau_s || self.tau_t_start >= self.tau_s {
            return bad(format!("teacher temperatures must stay below tau_s = {}", self.tau_s));
        }
        for (n, v) in [("betas.0", self.betas.0), ("betas.1", self.betas.1)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{n} = {v} outside [0, 1)"));
            }
        }
        for (n, v) in [
            ("center_momentum", self.center_momentum),
            ("teacher_momentum_start", self.teacher_momentum_start),
            ("teacher_momentum_end", self.teacher_momentum_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{n} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// Step counts that the per-step schedules are defined over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, n_samples: usize) -> Result<Self> {
        let spe = cfg.steps_per_epoch(n_samples);
        if spe == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(Self {
            steps_per_epoch: spe,
            total_steps: spe * cfg.epochs,
            warmup_steps: spe * cfg.warmup_epochs,
        })
    }

    fn check(&self, step: usize) -> Result<()> {
        if step >= self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} outside [0, {})",
                self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine to `final_lr` at the last step.
pub fn lr_at(step: usize, sched: &Schedule, cfg: &TrainConfig) -> Result<f64> {
    sched.check(step)?;
    let w = sched.warmup_steps;
    if step < w {
        return Ok(cfg.base_lr * step as f64 / w as f64);
    }
    let span = sched.total_steps - 1 - w;
    let progress = if span == 0 {
        0.0
    } else {
        (step - w) as f64 / span as f64
    };
    Ok(cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + (PI * progress).cos()))
}

/// Linear over the first `tau_t_warmup_epochs`, constant afterwards.
pub fn tau_t_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.tau_t_warmup_epochs;
    if epoch >= w {
        cfg.tau_t_end
    } else {
        cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * epoch as f64 / w as f64
    }
}

/// Cosine from `teacher_momentum_start` at step 0 to `teacher_momentum_end` at the last step.
pub fn teacher_momentum_at(step: usize, sched: &Schedule, cfg: &TrainConfig) -> Result<f64> {
    sched.check(step)?;
    let progress = if sched.total_steps > 1 {
        step as f64 / (sched.total_steps - 1) as f64
    } else {
        1.0
    };
    let (a, b) = (cfg.teacher_momentum_start, cfg.teacher_momentum_end);
    Ok(b - (b - a) * 0.5 * (1.0 + (PI * progress).cos()))
}
