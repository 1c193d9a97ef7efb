//! Cosine learning-rate schedule over a whole run, no warmup, no restarts.

use crate::error::{Error, Result};

/// lr(step) = 0.5 * lr_max * (1 + cos(pi * step / total_steps)).
///
/// `step` counts completed optimizer steps, so step 0 yields `lr_max` and
/// `step == total_steps` yields 0.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig("schedule needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} is past the end of a {total_steps}-step schedule"
        )));
    }
    if !lr_max.is_finite() || lr_max <= 0.0 {
        return Err(Error::InvalidConfig("lr_max must be finite and positive".into()));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(0.5 * lr_max * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn endpoints_and_midpoint() {
        let lr_max = 2e-4;
        assert_eq!(cosine_lr(0, 100, lr_max).unwrap(), lr_max);
        assert_eq!(cosine_lr(100, 100, lr_max).unwrap(), 0.0);
        assert_relative_eq!(cosine_lr(50, 100, lr_max).unwrap(), 0.5 * lr_max, epsilon = 1e-18);
    }

    #[test]
    fn monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=977 {
            let lr = cosine_lr(step, 977, 0.1).unwrap();
            assert!(lr <= prev, "lr rose at step {step}");
            assert!(lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(cosine_lr(0, 0, 1e-3).is_err());
        assert!(cosine_lr(11, 10, 1e-3).is_err());
        assert!(cosine_lr(0, 10, 0.0).is_err());
        assert!(cosine_lr(0, 10, f64::NAN).is_err());
        assert!(cosine_lr(0, 10, -1.0).is_err());
    }
}
