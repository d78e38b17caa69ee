use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::FrozenInts;
use crate::schedule::CosineSchedule;

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.01;

fn default_momentum() -> f64 {
    DEFAULT_EMA_MOMENTUM
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeConfig {
    pub threshold: CosineSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl FreezeConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.threshold.start, self.threshold.end);
        if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
            return Err(Error::Config(format!(
                "freezing threshold must stay in (0, 1), got {a}..{b}"
            )));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "EMA momentum must be in (0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-weight oscillation state for one quantized tensor.
///
/// Holds the frequency EMA `f`, the direction of the last change that
/// counted as an oscillation, the previous integer values, an EMA of the
/// integer values and the frozen mask with the pinned integers.
#[derive(Clone, Debug, PartialEq)]
pub struct OscillationTracker {
    momentum: f64,
    freq: Vec<f64>,
    last_change: Vec<i64>,
    prev_int: Vec<i64>,
    ema_int: Vec<f64>,
    frozen: Vec<bool>,
    frozen_int: Vec<i64>,
}

fn sign(x: i64) -> i64 {
    x.signum()
}

impl OscillationTracker {
    pub fn new(initial_int: &[i64], momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("EMA momentum must be in (0, 1), got {momentum}")));
        }
        let n = initial_int.len();
        Ok(OscillationTracker {
            momentum,
            freq: vec![0.0; n],
            last_change: vec![0; n],
            prev_int: initial_int.to_vec(),
            ema_int: initial_int.iter().map(|&k| k as f64).collect(),
            frozen: vec![false; n],
            frozen_int: vec![0; n],
        })
    }

    /// Rebuilds a tracker from stored state, checking that the parts agree.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        momentum: f64,
        freq: Vec<f64>,
        last_change: Vec<i64>,
        prev_int: Vec<i64>,
        ema_int: Vec<f64>,
        frozen: Vec<bool>,
        frozen_int: Vec<i64>,
    ) -> Result<Self> {
        let n = freq.len();
        if [
            last_change.len(),
            prev_int.len(),
            ema_int.len(),
            frozen.len(),
            frozen_int.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Invalid("tracker state vectors differ in length".into()));
        }
        if freq.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Invalid("tracker frequency outside [0, 1]".into()));
        }
        let mut t = OscillationTracker::new(&prev_int, momentum)?;
        t.freq = freq;
        t.last_change = last_change;
        t.ema_int = ema_int;
        t.frozen = frozen;
        t.frozen_int = frozen_int;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freq
    }

    pub fn last_change(&self) -> &[i64] {
        &self.last_change
    }

    pub fn current_int(&self) -> &[i64] {
        &self.prev_int
    }

    pub fn integer_ema(&self) -> &[f64] {
        &self.ema_int
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn frozen_int(&self) -> &[i64] {
        &self.frozen_int
    }

    pub fn frozen_ints(&self) -> FrozenInts {
        FrozenInts {
            mask: self.frozen.clone(),
            ints: self.frozen_int.clone(),
        }
    }

    pub fn any_frozen(&self) -> bool {
        self.frozen.iter().any(|&b| b)
    }

    /// Records the integer values after an optimizer step and returns the
    /// oscillation events: a nonzero change whose direction differs from the
    /// last recorded oscillation direction.
    pub fn track_step(&mut self, w_int: &[i64]) -> Result<Vec<bool>> {
        if w_int.len() != self.len() {
            return Err(Error::shape("track_step", &[w_int.len()], &[self.len()]));
        }
        let m = self.momentum;
        let mut events = vec![false; w_int.len()];
        for (i, &k) in w_int.iter().enumerate() {
            if self.frozen[i] && k != self.frozen_int[i] {
                return Err(Error::Invalid(format!(
                    "frozen weight {i} moved from {} to {k}",
                    self.frozen_int[i]
                )));
            }
            let delta = k - self.prev_int[i];
            let o = delta != 0 && sign(delta) != sign(self.last_change[i]);
            self.freq[i] = if o {
                m + (1.0 - m) * self.freq[i]
            } else {
                (1.0 - m) * self.freq[i]
            };
            if o {
                self.last_change[i] = delta;
            }
            self.prev_int[i] = k;
            events[i] = o;
        }
        Ok(events)
    }

    /// Freezes every unfrozen weight whose frequency exceeds `threshold` at
    /// the rounded integer EMA. Returns the indices frozen by this call.
    pub fn freeze(&mut self, threshold: f64) -> Vec<usize> {
        let mut newly = Vec::new();
        for i in 0..self.len() {
            if !self.frozen[i] && self.freq[i] > threshold {
                self.frozen[i] = true;
                self.frozen_int[i] = self.ema_int[i].round() as i64;
                // keep the tracked integer consistent with the pinned value
                self.prev_int[i] = self.frozen_int[i];
                newly.push(i);
            }
        }
        newly
    }

    /// `ema <- m * w_int + (1 - m) * ema` using the latest tracked integers.
    pub fn update_integer_ema(&mut self) {
        let m = self.momentum;
        for (e, &k) in self.ema_int.iter_mut().zip(&self.prev_int) {
            *e = m * k as f64 + (1.0 - m) * *e;
        }
    }

    /// Share of weights with `f > f_min` that are not frozen.
    pub fn oscillating_fraction(&self, f_min: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.oscillating_count(f_min) as f64 / self.len() as f64
    }

    pub fn oscillating_count(&self, f_min: f64) -> usize {
        self.freq
            .iter()
            .zip(&self.frozen)
            .filter(|&(&f, &b)| f > f_min && !b)
            .count()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&b| b).count()
    }

    pub fn mean_frequency(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.freq.iter().sum::<f64>() / self.len() as f64
        }
    }
}

/// Freezing half of one training iteration: freeze against the scheduled
/// threshold, then advance the integer EMA.
pub fn freeze_step(tracker: &mut OscillationTracker, cfg: &FreezeConfig, step: u64) -> Vec<usize> {
    let newly = tracker.freeze(cfg.threshold.value(step));
    tracker.update_integer_ema();
    newly
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_traced_two_steps() {
        let mut t = OscillationTracker::new(&[2], 0.1).unwrap();
        assert_eq!(t.track_step(&[3]).unwrap(), vec![true]);
        assert_eq!(t.frequencies()[0], 0.1);
        assert_eq!(t.track_step(&[2]).unwrap(), vec![true]);
        assert!((t.frequencies()[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn constant_trajectory_never_oscillates() {
        let mut t = OscillationTracker::new(&[5], 0.1).unwrap();
        for _ in 0..50 {
            assert_eq!(t.track_step(&[5]).unwrap(), vec![false]);
        }
        assert_eq!(t.frequencies()[0], 0.0);
    }

    #[test]
    fn monotone_trajectory_with_preset_direction() {
        let mut t =
            OscillationTracker::from_parts(0.1, vec![0.0], vec![1], vec![1], vec![1.0], vec![false], vec![0]).unwrap();
        for k in 2..=4 {
            assert_eq!(t.track_step(&[k]).unwrap(), vec![false]);
        }
        assert_eq!(t.frequencies()[0], 0.0);
    }

    #[test]
    fn same_direction_change_keeps_last_direction() {
        let mut t = OscillationTracker::new(&[0], 0.5).unwrap();
        t.track_step(&[1]).unwrap();
        // second upward move is not an event and does not overwrite
        assert_eq!(t.track_step(&[2]).unwrap(), vec![false]);
        assert_eq!(t.last_change()[0], 1);
        assert_eq!(t.track_step(&[1]).unwrap(), vec![true]);
        assert_eq!(t.last_change()[0], -1);
    }

    #[test]
    fn square_wave_matches_closed_form() {
        let m = 0.01;
        let mut t = OscillationTracker::new(&[0], m).unwrap();
        for step in 1..=300u32 {
            t.track_step(&[(step % 2) as i64]).unwrap();
            let expect = 1.0 - (1.0 - m).powi(step as i32);
            assert!((t.frequencies()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn freezing_example() {
        let mut t = OscillationTracker::new(&[2, 0], 0.1).unwrap();
        t.track_step(&[3, 0]).unwrap();
        t.update_integer_ema();
        t.track_step(&[2, 0]).unwrap();
        assert!((t.frequencies()[0] - 0.19).abs() < 1e-15);
        let cfg = FreezeConfig {
            threshold: CosineSchedule::constant(0.15),
            momentum: 0.1,
        };
        let newly = freeze_step(&mut t, &cfg, 0);
        assert_eq!(newly, vec![0]);
        assert!(t.frozen()[0] && !t.frozen()[1]);
        // EMA was 2.1 before this step
        assert_eq!(t.frozen_int()[0], 2);
        assert!(t.track_step(&[3, 0]).is_err());
    }

    #[test]
    fn frozen_level_follows_time_spent() {
        // 1 -> 2 -> 2 -> 2 -> 2 -> 1 -> ... spends 80% of the time at 2
        let m = 0.01;
        let mut t = OscillationTracker::new(&[1], m).unwrap();
        let cycle = [2, 2, 2, 2, 1];
        for step in 0..3000 {
            t.track_step(&[cycle[step % 5]]).unwrap();
            t.update_integer_ema();
        }
        let ema = t.integer_ema()[0];
        assert!((ema - 1.8).abs() < 0.02, "{ema}");
        t.freeze(0.001);
        assert_eq!(t.frozen_int()[0], 2);
    }

    #[test]
    fn fractions() {
        let t = OscillationTracker::from_parts(
            0.01,
            vec![0.01, 0.001, 0.2],
            vec![0; 3],
            vec![0; 3],
            vec![0.0; 3],
            vec![false; 3],
            vec![0; 3],
        )
        .unwrap();
        assert!((t.oscillating_fraction(0.005) - 2.0 / 3.0).abs() < 1e-15);
        let all_frozen = OscillationTracker::from_parts(
            0.01,
            vec![0.3; 3],
            vec![0; 3],
            vec![0; 3],
            vec![0.0; 3],
            vec![true; 3],
            vec![0; 3],
        )
        .unwrap();
        assert_eq!(all_frozen.oscillating_fraction(0.005), 0.0);
        assert_eq!(
            OscillationTracker::new(&[1, 2], 0.01)
                .unwrap()
                .oscillating_fraction(0.005),
            0.0
        );
    }

    #[test]
    fn zero_frequency_never_freezes() {
        let mut t = OscillationTracker::new(&[1, 2, 3], 0.01).unwrap();
        let cfg = FreezeConfig {
            threshold: CosineSchedule::new(0.04, 0.01, 100).unwrap(),
            momentum: 0.01,
        };
        for step in 0..100 {
            t.track_step(&[1, 2, 3]).unwrap();
            assert!(freeze_step(&mut t, &cfg, step).is_empty());
        }
        assert_eq!(t.frozen_count(), 0);
    }

    proptest! {
        #[test]
        fn frequency_is_convex_combination(traj in proptest::collection::vec(-3i64..3, 2..200), m in 0.001f64..0.9) {
            let mut t = OscillationTracker::new(&traj[..1], m).unwrap();
            let mut first_event_seen = false;
            for &k in &traj[1..] {
                let before = t.frequencies()[0];
                let o = t.track_step(&[k]).unwrap()[0];
                let after = t.frequencies()[0];
                let ov = if o { 1.0 } else { 0.0 };
                prop_assert!(after >= before.min(ov) - 1e-15 && after <= before.max(ov) + 1e-15);
                prop_assert!((0.0..=1.0).contains(&after));
                first_event_seen |= o;
                if !first_event_seen {
                    prop_assert_eq!(after, 0.0);
                }
            }
        }

        #[test]
        fn frozen_set_only_grows(traj in proptest::collection::vec(proptest::collection::vec(-2i64..2, 4), 1..100)) {
            let mut t = OscillationTracker::new(&[0; 4], 0.2).unwrap();
            let mut prev_frozen = vec![false; 4];
            for step in traj {
                // frozen weights report their pinned integer
                let ints: Vec<i64> = step.iter().enumerate()
                    .map(|(i, &k)| if t.frozen()[i] { t.frozen_int()[i] } else { k })
                    .collect();
                t.track_step(&ints).unwrap();
                t.freeze(0.3);
                t.update_integer_ema();
                for i in 0..4 {
                    prop_assert!(!prev_frozen[i] || t.frozen()[i]);
                }
                prev_frozen = t.frozen().to_vec();
            }
        }
    }
}
