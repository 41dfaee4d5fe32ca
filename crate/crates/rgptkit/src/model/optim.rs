//! AdamW with a warmup-then-cosine learning-rate schedule, plus the stage
//! plans that say which pipeline components it may touch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

/// Learning-rate shape over a fixed training horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear ramp from zero to `lr_max` over the warmup steps, then a
    /// half-cosine decay to zero at `total_steps`.
    WarmupCosine,
    /// `lr_max` at every step. Handy for small controlled experiments.
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn new(lr_max: f64, warmup_ratio: f64, total_steps: usize, weight_decay: f64) -> Self {
        OptimConfig {
            lr_max,
            warmup_ratio,
            total_steps,
            weight_decay,
            schedule: Schedule::WarmupCosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Number of warmup steps implied by the ratio, rounded up so any
    /// nonzero ratio yields at least one warmup step.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate applied at `step` (0-based). The ramp reaches `lr_max`
    /// exactly at `warmup_steps()` and the cosine tail reaches zero exactly
    /// at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr_max,
            Schedule::WarmupCosine => {
                let w = self.warmup_steps();
                if w > 0 && step < w {
                    return self.lr_max * step as f64 / w as f64;
                }
                let total = self.total_steps.max(w);
                if total == w {
                    return self.lr_max;
                }
                let t = (step.min(total) - w) as f64 / (total - w) as f64;
                self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter name,
/// so the same optimizer instance can be reused across steps as long as the
/// set of trainable parameters stays put.
pub struct AdamW {
    cfg: OptimConfig,
    step_count: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.step_count)
    }

    /// Applies one update to every parameter of the given modules.
    ///
    /// If any gradient entry is NaN or infinite the whole step is rejected:
    /// no parameter moves, the step counter stays put, and the offending
    /// parameter is named in the error.
    pub fn step(&mut self, modules: &mut [&mut dyn Parameterized]) -> Result<()> {
        let mut bad: Option<String> = None;
        for m in modules.iter_mut() {
            m.for_each_param(&mut |slot| {
                if bad.is_none() && slot.grad.iter().any(|g| !g.is_finite()) {
                    bad = Some(slot.name.to_string());
                }
            });
        }
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }

        let lr = self.cfg.lr_at(self.step_count);
        let t = (self.step_count + 1) as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let wd = self.cfg.weight_decay;
        let eps = self.cfg.eps;
        for m in modules.iter_mut() {
            let moments = &mut self.moments;
            m.for_each_param(&mut |slot| {
                let entry = moments
                    .entry(slot.name.to_string())
                    .or_insert_with(|| (vec![0.0; slot.value.len()], vec![0.0; slot.value.len()]));
                for i in 0..slot.value.len() {
                    let g = slot.grad[i];
                    entry.0[i] = b1 * entry.0[i] + (1.0 - b1) * g;
                    entry.1[i] = b2 * entry.1[i] + (1.0 - b2) * g * g;
                    let mhat = entry.0[i] / bc1;
                    let vhat = entry.1[i] / bc2;
                    slot.value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * slot.value[i]);
                }
            });
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Trainable pipeline components. The image backbone is deliberately absent:
/// nothing in the toolkit can mark it trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Refinement,
    Connector,
    Decoder,
}

/// Which training stage a plan (or a saved model) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

/// A training stage: the trainable subset plus optimizer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<Component>,
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
}

impl StagePlan {
    /// Alignment stage: only the feature refiner and the connector learn,
    /// everything on the text side stays fixed.
    pub fn pretrain() -> Self {
        StagePlan {
            stage: Stage::Pretrain,
            trainable: vec![Component::Refinement, Component::Connector],
            lr_max: 1e-3,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            schedule: Schedule::WarmupCosine,
            batch_size: 256,
            epochs: 1,
        }
    }

    /// Instruction stage: the decoder joins the trainable set at a much
    /// smaller learning rate.
    pub fn finetune() -> Self {
        StagePlan {
            stage: Stage::Finetune,
            trainable: vec![Component::Refinement, Component::Connector, Component::Decoder],
            lr_max: 2e-5,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            schedule: Schedule::WarmupCosine,
            batch_size: 128,
            epochs: 1,
        }
    }

    pub fn trains(&self, c: Component) -> bool {
        self.trainable.contains(&c)
    }

    pub fn optim_config(&self, total_steps: usize) -> OptimConfig {
        OptimConfig {
            lr_max: self.lr_max,
            warmup_ratio: self.warmup_ratio,
            total_steps,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}
