use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-indexed learning-rate, teacher-momentum and centroid weight-decay schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub teacher_momentum_start: f64,
    pub teacher_momentum_end: f64,
    pub centroid_wd_start: f64,
    pub centroid_wd_end: f64,
}

/// Values of every schedule at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValues {
    pub lr: f64,
    pub teacher_momentum: f64,
    pub centroid_wd: f64,
}

/// `end + (start - end)·(1 + cos(π·progress))/2`, for progress in [0, 1].
pub fn cosine(start: f64, end: f64, progress: f64) -> f64 {
    end + (start - end) * (1.0 + (PI * progress).cos()) / 2.0
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Parameter(format!(
                "warmup of {} steps exceeds {} total",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> Result<ScheduleValues> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Parameter(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        let lr = if step < self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else {
            let span = (self.total_steps - self.warmup_steps).max(1) as f64;
            let progress = (step - self.warmup_steps) as f64 / span;
            cosine(self.base_lr, self.lr_floor, progress)
        };
        let progress = step as f64 / self.total_steps as f64;
        Ok(ScheduleValues {
            lr,
            teacher_momentum: cosine(
                self.teacher_momentum_start,
                self.teacher_momentum_end,
                progress,
            ),
            centroid_wd: cosine(self.centroid_wd_start, self.centroid_wd_end, progress),
        })
    }
}
