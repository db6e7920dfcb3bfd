use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. Steps past the end stay at 0.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps);
    if decay_steps == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / decay_steps as f64).min(1.0);
    (base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}
