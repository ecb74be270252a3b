use std::f64::consts::PI;

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine annealing to
/// zero over the remaining steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
