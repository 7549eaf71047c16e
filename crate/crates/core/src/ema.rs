//! Exponential moving average of parameter buffers.

use crate::error::{invalid, Result};

/// In place `target ← μ·target + (1−μ)·online`.
///
/// `μ = 1` leaves the target untouched and `μ = 0` copies the online values
/// bit for bit; for `μ` in between every result lies between its two inputs.
pub fn ema_update(target: &mut [f32], online: &[f32], mu: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(invalid!(
            "EMA buffers differ in length: {} vs {}",
            target.len(),
            online.len()
        ));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid!("EMA decay must lie in [0, 1], got {mu}"));
    }
    if mu == 1.0 {
        return Ok(());
    }
    if mu == 0.0 {
        target.copy_from_slice(online);
        return Ok(());
    }
    // Mixed in f64 and rounded once, so each entry is the f32 nearest the
    // exact combination; rounding is monotone, so it stays in the interval.
    for (t, &o) in target.iter_mut().zip(online) {
        *t = (mu * f64::from(*t) + (1.0 - mu) * f64::from(o)) as f32;
    }
    Ok(())
}
