//! Linear warmup followed by linear decay to zero.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { warmup_ratio: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearWarmup {
    pub lr_peak: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LinearWarmup {
    pub fn new(lr_peak: f64, total_steps: u64, warmup_ratio: f64) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).round() as u64).min(total_steps);
        Self {
            lr_peak,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate at `step`, counted from 1.
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.lr_peak;
            }
            return self.lr_peak * step as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.lr_peak * remaining / (self.total_steps - self.warmup_steps) as f64
    }
}
