//! Oscillation detection, dampening and iterative freezing of latent weights.

mod anneal;
mod dampen;
mod sampling;
mod tracker;

pub use anneal::{anneal_binary, AnnealConfig, AnnealResult};
pub use dampen::{dampen_loss, DampenConfig, DampenPenalty};
pub use sampling::{oscillating_levels, sample_oscillating};
pub use tracker::{freeze_step, FreezeConfig, OscillationTracker, DEFAULT_EMA_MOMENTUM};

/// Frequency above which a weight counts as oscillating in reports.
pub const OSCILLATION_REPORT_THRESHOLD: f64 = 0.005;
