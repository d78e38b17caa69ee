use rand::Rng;

use super::OscillationTracker;

/// The two integer levels weight `i` last moved between, low first.
pub fn oscillating_levels(tracker: &OscillationTracker, i: usize) -> (i64, i64) {
    let cur = tracker.current_int()[i];
    let other = cur - tracker.last_change()[i];
    (cur.min(other), cur.max(other))
}

/// Stochastic rounding of the oscillating weights.
///
/// Every unfrozen weight with `f > f_min` takes its upper level with
/// probability equal to the position of its integer EMA between the two
/// levels; all other weights keep their current integer.
pub fn sample_oscillating<R: Rng + ?Sized>(tracker: &OscillationTracker, f_min: f64, rng: &mut R) -> Vec<i64> {
    let mut out = tracker.current_int().to_vec();
    for (i, slot) in out.iter_mut().enumerate() {
        if tracker.frozen()[i] || tracker.frequencies()[i] <= f_min {
            continue;
        }
        let (lo, hi) = oscillating_levels(tracker, i);
        if lo == hi {
            continue;
        }
        let ema = tracker.integer_ema()[i];
        let mut p = (ema - lo as f64) / (hi - lo) as f64;
        if !(0.0..=1.0).contains(&p) {
            log::warn!("weight {i}: integer EMA {ema} outside observed levels [{lo}, {hi}], clamping");
            p = p.clamp(0.0, 1.0);
        }
        *slot = if rng.random::<f64>() < p { hi } else { lo };
    }
    out
}
