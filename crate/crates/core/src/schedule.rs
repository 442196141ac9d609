use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_iters: u64,
    pub warmup_iters: u64,
    /// Multiplier reached at `total_iters`.
    pub decay_floor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { total_iters: 40_000, warmup_iters: 1500, decay_floor: 0.01 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "warmup_iters ({}) must be smaller than total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_floor) {
            return Err(Error::Config("decay_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Learning rate multiplier for the update performed at `step` (0-based).
pub fn lr_factor(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.warmup_iters {
        return (step + 1) as f64 / cfg.warmup_iters as f64;
    }
    let span = cfg.total_iters.saturating_sub(cfg.warmup_iters);
    if span == 0 {
        return cfg.decay_floor;
    }
    let frac = ((step - cfg.warmup_iters) as f64 / span as f64).min(1.0);
    1.0 - (1.0 - cfg.decay_floor) * frac
}
