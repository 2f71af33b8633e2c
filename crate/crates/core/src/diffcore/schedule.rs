use serde::{Deserialize, Serialize};

/// Learning-rate schedule as a function of the optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear ramp from 0 to `peak_lr` over `warmup_fraction * total_steps`, then flat.
    LinearWarmupThenConstant {
        peak_lr: f64,
        warmup_fraction: f64,
        total_steps: u64,
    },
    /// Linear interpolation from `start_lr` to `end_lr` over `total_steps`.
    LinearDecay {
        start_lr: f64,
        end_lr: f64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn warmup(peak_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        LrSchedule::LinearWarmupThenConstant {
            peak_lr,
            warmup_fraction: warmup_fraction.clamp(0.0, 1.0),
            total_steps: total_steps.max(1),
        }
    }

    pub fn decay(start_lr: f64, end_lr: f64, total_steps: u64) -> Self {
        LrSchedule::LinearDecay {
            start_lr,
            end_lr,
            total_steps: total_steps.max(1),
        }
    }

    pub fn total_steps(&self) -> u64 {
        match *self {
            LrSchedule::LinearWarmupThenConstant { total_steps, .. } | LrSchedule::LinearDecay { total_steps, .. } => {
                total_steps
            }
        }
    }

    /// Learning rate at `step`; steps past the end are clamped.
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::LinearWarmupThenConstant {
                peak_lr,
                warmup_fraction,
                total_steps,
            } => {
                let step = step.min(total_steps) as f64;
                let warmup = warmup_fraction * total_steps as f64;
                if step >= warmup {
                    peak_lr
                } else {
                    peak_lr * step / warmup
                }
            }
            LrSchedule::LinearDecay {
                start_lr,
                end_lr,
                total_steps,
            } => {
                let frac = step.min(total_steps) as f64 / total_steps as f64;
                (1.0 - frac) * start_lr + frac * end_lr
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn warmup_examples() {
        let s = LrSchedule::warmup(2e-5, 0.1, 1000);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 2e-5);
        assert!((s.lr(50) - 1e-5).abs() < 1e-20);
        assert_eq!(s.lr(5000), 2e-5);
    }

    #[test]
    fn decay_examples() {
        let s = LrSchedule::decay(1e-5, 2e-6, 50_000);
        assert_eq!(s.lr(0), 1e-5);
        assert!((s.lr(25_000) - 6e-6).abs() < 1e-18);
        assert_eq!(s.lr(50_000), 2e-6);
        assert_eq!(s.lr(80_000), 2e-6);
    }

    #[test]
    fn zero_warmup_is_flat() {
        let s = LrSchedule::warmup(1e-3, 0.0, 10);
        assert_eq!(s.lr(0), 1e-3);
    }

    proptest! {
        #[test]
        fn warmup_monotone_then_flat(peak in 1e-6f64..1.0, frac in 0.0f64..=1.0, total in 1u64..500) {
            let s = LrSchedule::warmup(peak, frac, total);
            let warm = (frac * total as f64).ceil() as u64;
            let mut prev = 0.0;
            for step in 0..=total {
                let lr = s.lr(step);
                prop_assert!(lr >= 0.0);
                if step <= warm {
                    prop_assert!(lr >= prev);
                } else {
                    prop_assert_eq!(lr, peak);
                }
                prev = lr;
            }
        }

        #[test]
        fn decay_non_increasing(a in 1e-6f64..1.0, b in 1e-7f64..1e-6, total in 1u64..500) {
            let s = LrSchedule::decay(a, b, total);
            let mut prev = f64::INFINITY;
            for step in 0..=total {
                let lr = s.lr(step);
                prop_assert!(lr >= 0.0 && lr <= prev);
                prev = lr;
            }
            prop_assert_eq!(s.lr(total), b);
        }
    }
}
