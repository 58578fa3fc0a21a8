use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup from 0 to the peak, then cosine decay to `min_lr_fraction · peak`
/// at `total_steps`. Steps past the end stay at the floor.
pub fn lr_at(step: usize, tc: &TrainConfig) -> f64 {
    let peak = tc.peak_lr;
    if step < tc.warmup_steps {
        return peak * step as f64 / tc.warmup_steps as f64;
    }
    let min = tc.min_lr_fraction * peak;
    if step == tc.warmup_steps {
        return peak;
    }
    if step >= tc.total_steps {
        return min;
    }
    let span = tc.total_steps - tc.warmup_steps;
    let progress = (step - tc.warmup_steps) as f64 / span as f64;
    min + (peak - min) * (1.0 + (PI * progress).cos()) / 2.0
}
