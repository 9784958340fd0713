//! Cosine-annealing learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-cosine decay from `lr_max` at step 0 to `lr_min` at step `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total: usize,
}

impl Schedule {
    pub fn new(lr_max: f64, lr_min: f64, total: usize) -> Result<Self> {
        if lr_min >= lr_max || lr_min.is_nan() || lr_max.is_nan() {
            return Err(Error::InvalidConfig(format!("lr_min {lr_min} must be below lr_max {lr_max}")));
        }
        if total == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        Ok(Schedule { lr_max, lr_min, total })
    }

    /// Desk-scale default: 2e-4 → 1e-6 over `total` iterations.
    pub fn cosine_default(total: usize) -> Result<Self> {
        Schedule::new(2e-4, 1e-6, total)
    }
}

/// lr(step) = lr_min + ½(lr_max − lr_min)(1 + cos(π·step/T)); steps past the
/// end clamp to lr_min.
pub fn cosine_lr(step: usize, sched: &Schedule) -> f64 {
    if step >= sched.total {
        return sched.lr_min;
    }
    let progress = step as f64 / sched.total as f64;
    sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
