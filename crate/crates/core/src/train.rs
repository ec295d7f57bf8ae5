//! Denoiser training with AdamW.
//!
//! All per-step randomness (examples, timesteps, flips, noise) is drawn from a
//! generator keyed by the step index, so training resumed from a checkpoint
//! continues bit-identically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flip_horizontal, render_scene, Dataset};
use crate::diffusion::{q_sample, DiffusionSchedule, Prediction};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{encode_image, Ctx, ParamRole};
use crate::prompt::{batch_keep, Prompt};
use crate::rng::{generator, normal_from, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Abort when the loss stays above this multiple of the initial loss...
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// ...for this many consecutive steps.
pub const DIVERGENCE_PATIENCE: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to B-cos and projection weights only.
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            seed: 1,
            checkpoint_every: 2_000,
            flip: true,
        }
    }

    /// The full-scale recipe: batch 3, learning rate 2e-6, a million steps.
    pub fn full() -> Self {
        TrainConfig {
            steps: 1_000_000,
            batch: 3,
            lr: 2e-6,
            checkpoint_every: 50_000,
            ..TrainConfig::desk()
        }
    }

    pub fn tiny() -> Self {
        TrainConfig {
            steps: 50,
            batch: 2,
            checkpoint_every: 25,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || self.checkpoint_every == 0 {
            return Err(Error::Config("batch, learning rate and checkpoint interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("need 0 <= beta < 1 and eps > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Optimizer and guard state carried across checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub step: u64,
    pub initial_loss: Option<f64>,
    pub over_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub prompts: Vec<Prompt>,
    pub timesteps: Vec<usize>,
    /// Encoded clean images `[B, 6, H, W]`.
    pub x0: Tensor,
    pub noise: Tensor,
}

pub struct Trainer {
    pub model: Model,
    pub schedule: DiffusionSchedule,
    pub state: TrainingState,
}

impl Trainer {
    pub fn new(model: Model, schedule: DiffusionSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = model.store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Ok(Trainer {
            model,
            schedule,
            state: TrainingState {
                config,
                step: 0,
                initial_loss: None,
                over_count: 0,
                m: zeros.clone(),
                v: zeros,
            },
        })
    }

    pub fn resume(model: Model, schedule: DiffusionSchedule, state: TrainingState) -> Result<Self> {
        state.config.validate()?;
        let n = model.store.len();
        if state.m.len() != n || state.v.len() != n {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} / {} tensors for {n} parameters",
                state.m.len(),
                state.v.len()
            )));
        }
        Ok(Trainer { model, schedule, state })
    }

    pub fn step_index(&self) -> u64 {
        self.state.step
    }

    /// The batch for training step `step`; a pure function of the seed and the step.
    pub fn batch(&self, data: &Dataset, step: u64) -> Result<Batch> {
        let cfg = &self.state.config;
        let size = self.model.config.image_size;
        if data.image_size != size || data.max_tokens != self.model.config.max_tokens {
            return Err(Error::Config(format!(
                "dataset is {}px/{} tokens but the model expects {size}px/{} tokens",
                data.image_size, data.max_tokens, self.model.config.max_tokens
            )));
        }
        let mut rng = generator(cfg.seed, Stream::TrainStep(step));
        let mut prompts = Vec::with_capacity(cfg.batch);
        let mut timesteps = Vec::with_capacity(cfg.batch);
        let mut images = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ex = data.sample(&mut rng)?;
            let flip = cfg.flip && rng.gen_bool(0.5);
            timesteps.push(rng.gen_range(1..=self.schedule.steps()));
            let mut img = render_scene(&ex.spec, size, size)?;
            if flip {
                img = flip_horizontal(&img);
            }
            images.push(encode_image(&img)?.into_tensor());
            prompts.push(ex.prompt);
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let x0 = Tensor::concat(&refs, 0)?.reshape(&self.model.image_shape(cfg.batch))?;
        let noise = normal_from(&mut rng, x0.shape());
        Ok(Batch {
            prompts,
            timesteps,
            x0,
            noise,
        })
    }

    /// Mean squared error and its gradient for every parameter, in declaration order.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let n = batch.prompts.len();
        let mut x_t = Vec::with_capacity(batch.x0.len());
        let per = batch.x0.len() / n;
        for (b, &t) in batch.timesteps.iter().enumerate() {
            let range = b * per..(b + 1) * per;
            let x0 = Tensor::new(&[per], batch.x0.data()[range.clone()].to_vec())?;
            let nz = Tensor::new(&[per], batch.noise.data()[range].to_vec())?;
            x_t.extend_from_slice(q_sample(&x0, t, &self.schedule, &nz)?.x_t.data());
        }
        let x_t = Tensor::new(batch.x0.shape(), x_t)?;
        let target = match self.model.config.prediction {
            Prediction::X0 => batch.x0.clone(),
            Prediction::Epsilon => batch.noise.clone(),
        };
        let mut tape = Tape::new();
        let (loss, params) = {
            let mut ctx = Ctx::new(&mut tape, &self.model.store, true, false);
            let y = self.model.embedder.forward(&mut ctx, &batch.prompts)?;
            let keep = batch_keep(&batch.prompts);
            let xt = ctx.tape.constant(x_t);
            let pred = self.model.denoise(&mut ctx, xt, &batch.timesteps, y, &keep)?;
            let target = ctx.tape.constant(target);
            let diff = ctx.tape.sub(pred, target)?;
            let sq = ctx.tape.square(diff)?;
            let total = ctx.tape.sum_all(sq)?;
            let count = ctx.tape.value(diff).len() as f64;
            let loss = ctx.tape.scale(total, 1.0 / count)?;
            (loss, ctx.params().to_vec())
        };
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = params
            .iter()
            .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
            .collect();
        Ok((value, out))
    }

    fn apply(&mut self, grads: &[Tensor]) {
        let cfg = self.state.config.clone();
        let t = (self.state.step + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, entry) in self.model.store.entries_mut().iter_mut().enumerate() {
            let decay = match entry.role {
                ParamRole::BcosWeight | ParamRole::Projection => cfg.weight_decay,
                _ => 0.0,
            };
            let g = grads[i].data();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = entry.value.data_mut();
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
                p[k] -= cfg.lr * (update + decay * p[k]);
            }
        }
    }

    /// One optimization step. Returns the loss before the update.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        let batch = self.batch(data, self.state.step)?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at step {}", self.state.step)));
        }
        let initial = *self.state.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.state.over_count += 1;
            if self.state.over_count >= DIVERGENCE_PATIENCE {
                return Err(Error::Degenerate(format!(
                    "training diverged: loss above {DIVERGENCE_FACTOR}x the initial {initial:.4e} for {DIVERGENCE_PATIENCE} steps"
                )));
            }
        } else {
            self.state.over_count = 0;
        }
        self.apply(&grads);
        self.state.step += 1;
        Ok(loss)
    }

    /// Train until `state.step == until`, calling `on_step(trainer, loss)` after each step.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        mut on_step: impl FnMut(&Trainer, f64) -> Result<()>,
    ) -> Result<()> {
        while self.state.step < until {
            let loss = self.step(data)?;
            on_step(self, loss)?;
        }
        Ok(())
    }
}
