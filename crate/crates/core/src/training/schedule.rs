use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine decay `0.5·lr0·(1 + cos(π·t/T))` for epoch `t` of `T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Range(format!(
            "epoch {t} outside schedule of {total} epochs"
        )));
    }
    Ok(0.5 * lr0 * (1.0 + (PI * t as f64 / total as f64).cos()))
}
