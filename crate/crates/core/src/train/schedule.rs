use std::f64::consts::PI;

use crate::{Error, Result};

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total_epochs`.
/// `epoch` may be fractional.
pub fn cosine_lr(epoch: f64, total_epochs: f64, lr0: f64, lr_min: f64) -> Result<f64> {
    if !(total_epochs > 0.0) || !(0.0..=total_epochs).contains(&epoch) {
        return Err(Error::contract(
            "cosine_lr",
            format!("epoch {epoch} outside [0, {total_epochs}]"),
        ));
    }
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * epoch / total_epochs).cos()))
}

/// Linear warmup factor at fractional `epoch`, reaching one at `warmup`
/// epochs. `step` is the length of one update in epochs, so the first
/// update already runs at a nonzero rate.
pub fn warmup_factor(epoch: f64, step: f64, warmup: f64) -> f64 {
    if warmup <= 0.0 {
        1.0
    } else {
        ((epoch + step) / warmup).min(1.0)
    }
}
