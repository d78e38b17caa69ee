use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine interpolation from `start` to `end` over `total_steps`.
///
/// Steps past either end clamp to the endpoint value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::Config("schedule endpoints must be finite".into()));
        }
        Ok(CosineSchedule {
            start,
            end,
            total_steps,
        })
    }

    pub fn constant(value: f64) -> Self {
        CosineSchedule {
            start: value,
            end: value,
            total_steps: 1,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.start + 0.5 * (self.end - self.start) * (1.0 - (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        let lam = CosineSchedule::new(0.0, 1e-3, 1000).unwrap();
        assert_eq!(lam.value(0), 0.0);
        assert!((lam.value(500) - 5e-4).abs() < 1e-15);
        let fth = CosineSchedule::new(0.04, 0.01, 777).unwrap();
        assert!((fth.value(777) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_clamps() {
        let s = CosineSchedule::new(1.0, 3.0, 10).unwrap();
        assert_eq!(s.value(11), s.value(10));
        assert_eq!(s.value(u64::MAX), 3.0);
    }

    proptest! {
        #[test]
        fn monotone_when_decreasing(start in 0.0f64..10.0, drop in 0.0f64..10.0, total in 1u64..500) {
            let s = CosineSchedule::new(start, start - drop, total).unwrap();
            for k in 0..total {
                prop_assert!(s.value(k + 1) <= s.value(k) + 1e-15);
            }
        }
    }
}
