use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Linear warmup followed by cosine decay.
///
/// ```text
/// lr(s) = lr_init · s / warmup                                   s < warmup
///       = lr_final + (lr_init − lr_final) · ½(1 + cos(π·progress))  warmup ≤ s < total
///       = lr_final                                                s ≥ total
/// ```
/// with `total = total_epochs · steps_per_epoch` and
/// `progress = (s − warmup) / (total − warmup)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_epochs: usize,
    pub warmup_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lr_init: 2e-4, lr_final: 1e-6, total_epochs: 200, warmup_steps: 500 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_init) {
            return Err(config_err!(
                "learning rates must satisfy 0 <= lr_final <= lr_init, 0 < lr_init (got {} and {})",
                self.lr_final,
                self.lr_init
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self, steps_per_epoch: u64) -> u64 {
        self.total_epochs as u64 * steps_per_epoch
    }

    pub fn lr_at(&self, step: u64, steps_per_epoch: u64) -> f64 {
        let total = self.total_steps(steps_per_epoch);
        if step < self.warmup_steps {
            return self.lr_init * step as f64 / self.warmup_steps as f64;
        }
        if step >= total {
            return self.lr_final;
        }
        let progress = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        if progress == 0.0 {
            // lr_final + (lr_init − lr_final) can differ from lr_init in the last bit.
            return self.lr_init;
        }
        self.lr_final + (self.lr_init - self.lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
