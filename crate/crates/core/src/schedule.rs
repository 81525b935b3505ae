//! Linear warmup followed by step decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub warmup_start: f64,
    pub lr_max: f64,
    pub decay: f64,
    pub decay_every_epochs: u64,
    pub warmup_steps: u64,
    pub steps_per_epoch: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_start: 1e-6,
            lr_max: 1e-4,
            decay: 0.9,
            decay_every_epochs: 5,
            warmup_steps: 0,
            steps_per_epoch: 1,
        }
    }
}

impl LrSchedule {
    /// Warmup over `warmup_fraction` of `total_steps`.
    pub fn for_run(total_steps: u64, steps_per_epoch: u64, warmup_fraction: f64) -> Self {
        Self {
            warmup_steps: (total_steps as f64 * warmup_fraction).round() as u64,
            steps_per_epoch: steps_per_epoch.max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_start > 0.0 && self.lr_max > 0.0 && self.warmup_start <= self.lr_max) {
            return Err(Error::Config("need 0 < warmup_start <= lr_max".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("decay must lie in (0, 1] with positive periods".into()));
        }
        Ok(())
    }

    /// Epochs are counted from the end of warmup.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_start + (self.lr_max - self.warmup_start) * frac;
        }
        let epoch = (step - self.warmup_steps) / self.steps_per_epoch;
        self.lr_max * self.decay.powi((epoch / self.decay_every_epochs) as i32)
    }
}

pub fn lr_schedule(step: u64, schedule: &LrSchedule) -> f64 {
    schedule.lr(step)
}
