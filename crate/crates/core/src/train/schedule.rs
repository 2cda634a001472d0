//! Linear warmup followed by cosine decay to zero.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Rate for 0-based `step`. Warmup reaches `base_lr` at step
    /// `warmup_steps`; the cosine reaches zero at step `total_steps - 1`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
