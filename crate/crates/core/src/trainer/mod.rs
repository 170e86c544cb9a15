//! Self-distillation pretraining loop with AdamW, schedules, and exact resume.

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{Checkpoint, RunConfigs};
pub use optim::{adamw_step, decays, AdamState, AdamW};
pub use schedule::{lr_at, tau_t_at, teacher_momentum_at, Schedule, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::augment::make_view_batch;
use crate::data::{batch_indices, Dataset};
use crate::dino::{self, Center, DinoState};
use crate::error::{Error, Result};
use crate::nn::{ParameterSet, VisionTransformer};
use crate::tensor::{Tape, Tensor};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau_t: f64,
    pub teacher_momentum: f64,
    /// Mean entropy (nats) of the teacher's centred, sharpened outputs.
    pub teacher_entropy: f64,
}

pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub configs: RunConfigs,
    pub vit: VisionTransformer,
    pub state: DinoState,
    pub adam: AdamState,
    pub schedule: Schedule,
    /// Optimizer steps completed.
    pub step: u64,
    /// Worker threads for view generation; results do not depend on it.
    pub view_threads: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh student from `train.seed`; teacher copies it, center starts at zero.
    pub fn new(dataset: &'a Dataset, configs: RunConfigs) -> Result<Self> {
        let student = ParameterSet::init(&configs.vit, configs.train.seed)?;
        let center = Center::zeros(configs.vit.out_dim, configs.train.center_momentum)?;
        let adam = AdamState::new(&student);
        Self::assemble(dataset, configs, DinoState::new(student, center), adam, 0)
    }

    /// Continue from a checkpoint written under identical configs.
    pub fn resume(dataset: &'a Dataset, configs: RunConfigs, ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_configs(&configs)?;
        Self::assemble(dataset, configs, ckpt.state, ckpt.adam, ckpt.step)
    }

    fn assemble(
        dataset: &'a Dataset,
        configs: RunConfigs,
        state: DinoState,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        configs.train.validate()?;
        configs.aug.validate()?;
        dataset.check_split(&configs.aug.channels)?;
        if configs.n_samples != dataset.len() {
            return Err(Error::Config(format!(
                "configs describe {} samples, dataset has {}",
                configs.n_samples,
                dataset.len()
            )));
        }
        if configs.vit.in_channels != dataset.channels() {
            return Err(Error::Config(format!(
                "network expects {} channels, dataset has {}",
                configs.vit.in_channels,
                dataset.channels()
            )));
        }
        let vit = VisionTransformer::new(configs.vit.clone())?;
        let schedule = Schedule::new(&configs.train, dataset.len())?;
        Ok(Self {
            dataset,
            configs,
            vit,
            state,
            adam,
            schedule,
            step,
            view_threads: 1,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            configs: self.configs.clone(),
            state: self.state.clone(),
            adam: self.adam.clone(),
            step: self.step,
        }
    }

    /// Run one optimizer step. On error the trainer state is left unchanged.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let cfg = &self.configs.train;
        let step = self.step as usize;
        let epoch = step / self.schedule.steps_per_epoch;
        let index = step % self.schedule.steps_per_epoch;
        let ids = batch_indices(self.dataset.len(), cfg.batch_size, cfg.seed, epoch as u64)?.swap_remove(index);
        let samples: Vec<_> = ids.iter().map(|&i| &self.dataset.samples[i]).collect();
        let views = make_view_batch(&samples, &self.configs.aug, cfg.seed, epoch as u64, self.view_threads)?;
        let b = samples.len();
        let n_views = views.n_views();

        let lr = lr_at(step, &self.schedule, cfg)?;
        let tau_t = tau_t_at(epoch, cfg);
        let momentum = teacher_momentum_at(step, &self.schedule, cfg)?;

        // Teacher sees the two global views only, without gradient.
        let teacher_logits = self.vit.forward_tensor(&self.state.teacher, &views.global)?;
        teacher_logits.check_finite("teacher logits")?;
        let k = self.configs.vit.out_dim;
        let probs = (0..2)
            .map(|v| {
                let rows = teacher_logits.data()[v * b * k..(v + 1) * b * k].to_vec();
                dino::teacher_probs(&Tensor::new(&[b, k], rows)?, &self.state.center, tau_t)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let params = self.state.student.bind(&mut tape, true);
        let global = tape.constant(views.global);
        let mut outs = vec![self.vit.forward(&mut tape, &params, global)?];
        if views.local.numel() > 0 {
            let local = tape.constant(views.local);
            outs.push(self.vit.forward(&mut tape, &params, local)?);
        }
        let student = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 0)?
        };
        let loss_var = dino::dino_loss_stacked(&mut tape, student, n_views, &probs, cfg.tau_s)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
        }
        let mut grads = tape.backward(loss_var)?;
        let grads = params.gradients(&mut grads, &self.state.student)?;
        drop(tape);

        let hp = AdamW {
            lr,
            weight_decay: cfg.weight_decay,
            betas: cfg.betas,
            eps: cfg.eps,
        };
        let mut student = self.state.student.clone();
        let mut adam = self.adam.clone();
        adamw_step(&mut student, &grads, &mut adam, &hp, decays)?;

        let entropy = probs.iter().map(dino::mean_entropy).sum::<f64>() / probs.len() as f64;
        let center = dino::update_center(&self.state.center, &teacher_logits)?;
        let mut teacher = self.state.teacher.clone();
        dino::update_teacher(&mut teacher, &student, momentum)?;
        self.state = DinoState {
            student,
            teacher,
            center,
        };
        self.adam = adam;
        self.step += 1;
        Ok(StepMetrics {
            step: step as u64,
            epoch: epoch as u64,
            loss,
            lr,
            tau_t,
            teacher_momentum: momentum,
            teacher_entropy: entropy,
        })
    }

    /// Step until done or `max_steps` more steps ran, reporting each step.
    pub fn run(&mut self, max_steps: Option<u64>, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        let limit = max_steps.map_or(u64::MAX, |m| self.step.saturating_add(m));
        while !self.is_done() && self.step < limit {
            let m = self.train_step()?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}
