use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};

/// Learning rate at `step` of `total_steps`: linear warmup from zero to
/// `peak_lr` over the first `warmup_fraction` of training, then cosine decay
/// to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    lr_at_fractional(step as f64, total_steps, cfg)
}

/// [`lr_at`] for a fractional step in `[0, total_steps]`.
pub fn lr_at_fractional(step: f64, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    let total = total_steps as f64;
    if !(0.0..=total).contains(&step) {
        return Err(Error::Config(format!(
            "step {step} outside [0, {total_steps}]"
        )));
    }
    let warmup = cfg.warmup_fraction * total;
    if step <= warmup {
        return Ok(cfg.peak_lr * step / warmup);
    }
    let progress = (step - warmup) / (total - warmup);
    Ok(0.5 * cfg.peak_lr * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_peak() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(400, 1000, &cfg).unwrap(), 5e-5);
        assert!(lr_at(1000, 1000, &cfg).unwrap() <= 1e-12);
        assert!(lr_at(1, 0, &cfg).is_err());
        assert!(lr_at(0, 0, &cfg).is_err());
        assert!(lr_at(11, 10, &cfg).is_err());
    }

    #[test]
    fn warmup_is_linear_and_decay_is_cosine() {
        let cfg = TrainConfig::default();
        assert!((lr_at(200, 1000, &cfg).unwrap() - 2.5e-5).abs() < 1e-18);
        // halfway through the decay phase the cosine crosses zero
        assert!((lr_at(700, 1000, &cfg).unwrap() - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn fractional_steps_interpolate_the_same_curve() {
        let cfg = TrainConfig::default();
        for step in [0usize, 1, 399, 400, 401, 999, 1000] {
            assert_eq!(
                lr_at_fractional(step as f64, 1000, &cfg).unwrap(),
                lr_at(step, 1000, &cfg).unwrap()
            );
        }
        let mid = lr_at_fractional(399.5, 1000, &cfg).unwrap();
        assert!(lr_at(399, 1000, &cfg).unwrap() < mid && mid < 5e-5);
        assert!(lr_at_fractional(-0.5, 1000, &cfg).is_err());
        assert!(lr_at_fractional(f64::NAN, 1000, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn shape_holds_for_any_length(total in 1usize..5000, frac in 0.05f64..0.95) {
            let cfg = TrainConfig { warmup_fraction: frac, ..TrainConfig::default() };
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &cfg).unwrap()).collect();
            let peak = lrs.iter().cloned().fold(0.0, f64::max);
            prop_assert!(peak <= cfg.peak_lr * (1.0 + 1e-12));
            prop_assert!(lrs.iter().all(|v| *v >= 0.0));
            let top = lrs.iter().position(|v| *v == peak).unwrap();
            prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
            let boundary = (frac * total as f64).floor() as usize;
            prop_assert!(top == boundary || top == boundary + 1);
        }
    }
}
