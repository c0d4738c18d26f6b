//! Loss-weight and learning-rate schedules.

use super::config::{LrSchedule, TrainConfig};
use crate::{Error, Result};

/// Gaussian ramp-up `exp(−5·(1 − t/T)²)` for `t < T`, and exactly 1 after.
pub fn ramp_weight(t: usize, ramp_t: usize) -> Result<f64> {
    if ramp_t == 0 {
        return Err(Error::Config("ramp-up length T must be positive".into()));
    }
    if t >= ramp_t {
        return Ok(1.0);
    }
    let phase = 1.0 - t as f64 / ramp_t as f64;
    Ok((-5.0 * phase * phase).exp())
}

/// CCD weight: `lambda2_ramp` before epoch `T`, `lambda2_after` from `T` on.
pub fn lambda2(t: usize, ramp_t: usize, cfg: &TrainConfig) -> f64 {
    if t < ramp_t {
        cfg.lambda2_ramp
    } else {
        cfg.lambda2_after
    }
}

/// Warm-up fraction and end points of the one-cycle schedule.
pub const ONE_CYCLE_WARMUP: f64 = 0.3;
pub const ONE_CYCLE_START_DIV: f64 = 25.0;
pub const ONE_CYCLE_FLOOR_DIV: f64 = 1e4;

/// One-cycle: linear from `lr/25` to `lr` over the first 30% of steps, then
/// cosine annealing to `lr/1e4` at the final step.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr;
    match cfg.schedule {
        LrSchedule::Constant => peak,
        LrSchedule::OneCycle => one_cycle(step, total_steps, peak),
    }
}

fn one_cycle(step: usize, total_steps: usize, peak: f64) -> f64 {
    let start = peak / ONE_CYCLE_START_DIV;
    let floor = peak / ONE_CYCLE_FLOOR_DIV;
    let last = total_steps.saturating_sub(1);
    let warm = (ONE_CYCLE_WARMUP * total_steps as f64).round() as usize;
    let warm = warm.min(last);
    let step = step.min(last);
    if step < warm {
        let u = step as f64 / warm as f64;
        peak * u + start * (1.0 - u)
    } else if last == warm {
        peak
    } else {
        let progress = (step - warm) as f64 / (last - warm) as f64;
        let f = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        if progress >= 1.0 {
            floor
        } else {
            peak * f + floor * (1.0 - f)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_values() {
        assert_eq!(ramp_weight(30, 30).unwrap(), 1.0);
        assert_eq!(ramp_weight(31, 30).unwrap(), 1.0);
        assert!((ramp_weight(0, 30).unwrap() - (-5f64).exp()).abs() < 1e-15);
        assert!((ramp_weight(15, 30).unwrap() - (-1.25f64).exp()).abs() < 1e-15);
        assert!(ramp_weight(0, 0).is_err());
    }

    #[test]
    fn lambda2_switch() {
        let cfg = TrainConfig::default();
        assert_eq!(lambda2(0, 30, &cfg), 0.1);
        assert_eq!(lambda2(29, 30, &cfg), 0.1);
        assert_eq!(lambda2(30, 30, &cfg), 0.01);
    }

    #[test]
    fn one_cycle_landmarks() {
        let cfg = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let total = 100;
        assert_eq!(lr_schedule(0, total, &cfg), 1e-3 / 25.0);
        assert_eq!(lr_schedule(30, total, &cfg), 1e-3);
        assert!((lr_schedule(99, total, &cfg) - 1e-7).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 30..100 {
            let lr = lr_schedule(s, total, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
