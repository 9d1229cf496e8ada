//! Optimization of the speech heads: schedule, optimizer, batch sampling and
//! the training loop.

mod adam;
mod sampler;
mod schedule;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamHyper, AdamState};
pub use sampler::BatchSampler;
pub use schedule::lr_schedule;
pub use trainer::{init_model, train, EvalRecord, StepRecord, TrainOptions, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT};

use crate::error::{Error, Result};
use crate::model::{ModelKind, DEFAULT_KEYWORDS};

/// Named hyperparameter bundles for the optimization schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Batch 64, 2 000 steps, 200 warmup, peak 1e-3, floor 1e-6.
    Desk,
    /// Batch 256, 50 000 steps, 5 000 warmup, peak 1e-4, floor 1e-8.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Configuration(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Keyword slots of the cascaded head.
    pub keywords: usize,
    /// Cascaded head only; false runs the batch-norm ablation.
    pub batchnorm: bool,
    /// Dev evaluation and checkpoint interval in steps.
    pub eval_every: u64,
    /// Global gradient-norm cap; unset means no clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(ModelKind::Parallel, Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(model: ModelKind, preset: Preset) -> Self {
        let mut c = Self {
            model,
            batch_size: 64,
            total_steps: 2_000,
            warmup_steps: 200,
            peak_lr: 1e-3,
            floor_lr: 1e-6,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            keywords: DEFAULT_KEYWORDS,
            batchnorm: true,
            eval_every: 200,
            clip_norm: None,
        };
        c.apply_preset(preset);
        c
    }

    /// Overwrites the schedule fields with the preset's values.
    pub fn apply_preset(&mut self, preset: Preset) {
        let (batch, total, warmup, peak, floor, eval_every) = match preset {
            Preset::Desk => (64, 2_000, 200, 1e-3, 1e-6, 200),
            Preset::Paper => (256, 50_000, 5_000, 1e-4, 1e-8, 1_000),
        };
        self.batch_size = batch;
        self.total_steps = total;
        self.warmup_steps = warmup;
        self.peak_lr = peak;
        self.floor_lr = floor;
        self.eval_every = eval_every;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Configuration(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > self.floor_lr && self.floor_lr > 0.0) {
            return fail(format!("need peak_lr > floor_lr > 0, got {} and {}", self.peak_lr, self.floor_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("Adam epsilon must be positive".into());
        }
        if self.keywords == 0 {
            return fail("keywords must be at least 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail("clip_norm must be positive".into());
            }
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
