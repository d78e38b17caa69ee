//! One-dimensional quantized least-squares problem.
//!
//! Minimizing `E[(x w* - x q(w))^2] / 2` with `E[x^2] = sigma^2` gives the
//! gradient `sigma^2 (q(w) - w*)` with respect to `q(w)`. Gradient descent
//! on the latent weight through a straight-through estimator never settles:
//! the weight ends up hopping across the decision threshold next to `w*`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{Add, Scale, Square, Sub};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::SgdState;
use crate::oscillation::{DampenPenalty, OscillationTracker, DEFAULT_EMA_MOMENTUM};
use crate::quant::{EstimatorKind, FakeQuantize, QuantizerState};
use crate::tensor::Tensor;

pub const DEFAULT_TOY_STEPS: usize = 4000;
pub const DEFAULT_TOY_LR: f64 = 0.2;
/// Fraction of a trajectory discarded before measuring it.
pub const DEFAULT_BURN_IN: f64 = 0.5;
/// Trajectories running further than this many grid spans from the grid
/// count as diverged.
pub const DIVERGENCE_SPANS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyProblem {
    pub w_star: f64,
    pub scale: f64,
    pub sigma2: f64,
    pub n: i64,
    pub p: i64,
    pub estimator: EstimatorKind,
    pub lambda: f64,
    pub lr: f64,
    pub w0: f64,
    pub steps: usize,
    pub ema_momentum: f64,
}

impl Default for ToyProblem {
    fn default() -> Self {
        ToyProblem {
            w_star: 0.8,
            scale: 1.0,
            sigma2: 1.0,
            n: -8,
            p: 7,
            estimator: EstimatorKind::Ste,
            lambda: 0.0,
            lr: DEFAULT_TOY_LR,
            w0: 1.3,
            steps: DEFAULT_TOY_STEPS,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
        }
    }
}

impl ToyProblem {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("data variance must be positive, got {}", self.sigma2));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("dampening strength must be non-negative, got {}", self.lambda));
        }
        if self.steps == 0 {
            return bad("toy run needs at least one step".into());
        }
        if !self.w0.is_finite() {
            return bad("initial weight must be finite".into());
        }
        let q = self.quantizer()?;
        let (lo, hi) = self.grid_range();
        if !(lo < self.w_star && self.w_star < hi) {
            return bad(format!("w* = {} must lie strictly inside [{lo}, {hi}]", self.w_star));
        }
        if let EstimatorKind::Ewgs { delta } = q.estimator {
            if delta * q.scale / 2.0 >= 1.0 {
                return bad(format!(
                    "EWGS delta {delta} flips the gradient sign at scale {}",
                    q.scale
                ));
            }
        }
        Ok(())
    }

    pub fn quantizer(&self) -> Result<QuantizerState> {
        let q = QuantizerState {
            scale: self.scale,
            n: self.n,
            p: self.p,
            bits: 0,
            signed: self.n < 0,
            scale_trainable: false,
            estimator: self.estimator,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn grid_range(&self) -> (f64, f64) {
        (self.scale * self.n as f64, self.scale * self.p as f64)
    }

    /// The two grid levels bracketing `w*` and the threshold between them.
    pub fn levels(&self) -> (f64, f64, f64) {
        let down = self.scale * (self.w_star / self.scale).floor();
        let up = down + self.scale;
        (down, up, 0.5 * (down + up))
    }

    /// Distance from `w*` to its nearest grid level, relative to the scale.
    pub fn relative_distance(&self) -> f64 {
        let x = self.w_star / self.scale;
        (x - x.round()).abs()
    }
}

/// Task gradient with respect to the latent weight: `sigma^2 (q(w) - w*)`
/// passed through the configured estimator.
pub fn toy_gradient(w: f64, problem: &ToyProblem) -> Result<f64> {
    let q = problem.quantizer()?;
    let (_, w_hat) = q.quantize(w);
    let g = problem.sigma2 * (w_hat - problem.w_star);
    if !q.in_range(w) {
        return Ok(0.0);
    }
    Ok(g * q.estimator.multiplier(g, w, w_hat, q.scale))
}

/// Row of the two-level update table: one gradient-descent step written
/// in terms of the levels `w_down`, `w_up` around `w*`. Requires
/// `sigma^2 = 1` and `w` between the two levels.
pub fn closed_form_update(w: f64, problem: &ToyProblem) -> Result<f64> {
    if problem.sigma2 != 1.0 {
        return Err(Error::Config("closed-form updates assume unit data variance".into()));
    }
    let (down, up, bar) = problem.levels();
    let k = (problem.w_star / problem.scale).floor();
    if !(down <= w && w <= up) || k < problem.n as f64 || k + 1.0 > problem.p as f64 {
        return Err(Error::Config(format!(
            "closed-form updates assume {down} <= w <= {up} inside the grid, got w = {w}"
        )));
    }
    let (eta, ws, lambda) = (problem.lr, problem.w_star, problem.lambda);
    let upper = w >= bar;
    let level = if upper { up } else { down };
    let residual = level - ws;
    let step = match problem.estimator {
        EstimatorKind::Ste => residual,
        EstimatorKind::Psg { epsilon } => {
            let dist = if upper { up - w } else { w - down };
            residual * (dist + epsilon)
        }
        EstimatorKind::Ewgs { delta } => {
            if upper {
                residual * (1.0 + delta * (w - up))
            } else {
                residual * (1.0 - delta * (w - down))
            }
        }
        EstimatorKind::Dsq { .. } => {
            return Err(Error::Config("no closed-form row for the DSQ estimator".into()));
        }
    };
    let step = if lambda > 0.0 {
        if !matches!(problem.estimator, EstimatorKind::Ste) {
            return Err(Error::Config("the dampening row assumes the plain STE".into()));
        }
        residual + 2.0 * lambda * (w - level)
    } else {
        step
    };
    Ok(w - eta * step)
}

/// Per-step record of a toy run; index 0 is the initial state.
#[derive(Clone, Debug)]
pub struct ToyTrajectory {
    pub latent: Vec<f64>,
    pub ints: Vec<i64>,
    pub freq: Vec<f64>,
    pub tracker: OscillationTracker,
}

impl ToyTrajectory {
    /// Integer changes within the last `fraction` of steps.
    pub fn changes_in_tail(&self, fraction: f64) -> usize {
        let steps = self.ints.len() - 1;
        let start = steps - ((steps as f64 * fraction).round() as usize).min(steps);
        self.ints[start..].windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,latent_w,w_int,f_ema\n");
        for i in 0..self.latent.len() {
            out.push_str(&format!("{i},{},{},{}\n", self.latent[i], self.ints[i], self.freq[i]));
        }
        out
    }
}

/// The toy loss as a graph: `sigma^2/2 (q(w) - w*)^2` plus the dampening
/// penalty when `lambda > 0`.
struct ToyGraph {
    graph: Graph,
    w: crate::autodiff::NodeId,
    loss: crate::autodiff::NodeId,
}

impl ToyGraph {
    fn build(problem: &ToyProblem, w0: f64) -> Result<Self> {
        let q = problem.quantizer()?;
        let mut graph = Graph::new();
        let w = graph.param(Tensor::scalar(w0));
        let s = graph.constant(Tensor::scalar(q.scale));
        let target = graph.constant(Tensor::scalar(problem.w_star));
        let wq = graph.apply(FakeQuantize { state: q, frozen: None }, &[w, s])?;
        let r = graph.apply(Sub, &[wq, target])?;
        let r2 = graph.apply(Square, &[r])?;
        let mut loss = graph.apply(Scale(problem.sigma2 / 2.0), &[r2])?;
        if problem.lambda > 0.0 {
            let pen = graph.apply(
                DampenPenalty {
                    state: q,
                    lambda: problem.lambda,
                },
                &[w, s],
            )?;
            loss = graph.apply(Add, &[loss, pen])?;
        }
        Ok(ToyGraph { graph, w, loss })
    }

    fn gradient(&mut self, w: f64) -> Result<f64> {
        self.graph.set_leaf(self.w, Tensor::scalar(w))?;
        self.graph.forward(self.loss)?;
        let g = self.graph.backward(self.loss)?;
        Ok(g.get(self.w).map(|t| t.item()).unwrap_or(0.0))
    }
}

/// One plain gradient-descent step through the autodiff graph.
pub fn autodiff_step(w: f64, problem: &ToyProblem) -> Result<f64> {
    problem.validate()?;
    let mut g = ToyGraph::build(problem, w)?;
    let grad = g.gradient(w)?;
    let mut opt = SgdState::new(problem.lr, 0.0)?;
    let mut wt = Tensor::scalar(w);
    opt.step_slot(0, &mut wt, &Tensor::scalar(grad), None)?;
    Ok(wt.item())
}

/// Runs `problem.steps` gradient-descent steps and tracks oscillations of
/// the integer weight.
pub fn simulate_trajectory(problem: &ToyProblem) -> Result<ToyTrajectory> {
    problem.validate()?;
    let q = problem.quantizer()?;
    let mut graph = ToyGraph::build(problem, problem.w0)?;
    let mut opt = SgdState::new(problem.lr, 0.0)?;
    let (lo, hi) = problem.grid_range();
    let limit = DIVERGENCE_SPANS * (hi - lo);

    let mut w = Tensor::scalar(problem.w0);
    let (k0, _) = q.quantize(problem.w0);
    let mut tracker = OscillationTracker::new(&[k0], problem.ema_momentum)?;
    let mut latent = Vec::with_capacity(problem.steps + 1);
    let mut ints = Vec::with_capacity(problem.steps + 1);
    let mut freq = Vec::with_capacity(problem.steps + 1);
    latent.push(problem.w0);
    ints.push(k0);
    freq.push(0.0);

    for step in 0..problem.steps {
        let grad = graph.gradient(w.item())?;
        opt.step_slot(0, &mut w, &Tensor::scalar(grad), None)?;
        let wv = w.item();
        if !wv.is_finite() || wv.abs() > limit + lo.abs().max(hi.abs()) {
            return Err(Error::Diverged(format!(
                "toy weight reached {wv} at step {}; lower the learning rate",
                step + 1
            )));
        }
        let (k, _) = q.quantize(wv);
        tracker.track_step(&[k])?;
        tracker.update_integer_ema();
        latent.push(wv);
        ints.push(k);
        freq.push(tracker.frequencies()[0]);
    }
    Ok(ToyTrajectory {
        latent,
        ints,
        freq,
        tracker,
    })
}

fn burn_in_start(len: usize, burn_in: usize) -> Result<usize> {
    if len < burn_in + 2 {
        return Err(Error::Invalid(format!(
            "trajectory of {len} points is too short for a burn-in of {burn_in} steps"
        )));
    }
    Ok(burn_in)
}

/// Oscillation cycles per step after `burn_in` steps: integer changes
/// divided by twice the number of steps (two changes make one cycle).
pub fn measure_frequency(ints: &[i64], burn_in: usize) -> Result<f64> {
    let start = burn_in_start(ints.len(), burn_in)?;
    let window = &ints[start..];
    let changes = window.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(changes as f64 / (2.0 * (window.len() - 1) as f64))
}

/// Peak-to-peak amplitude of the latent weight after burn-in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Amplitude {
    pub value: f64,
    /// False when the latent weight stopped reversing direction; `value`
    /// is then 0.
    pub oscillating: bool,
}

pub fn measure_amplitude(latent: &[f64], burn_in: usize) -> Result<Amplitude> {
    let start = burn_in_start(latent.len(), burn_in)?;
    let window = &latent[start..];
    let mut reversals = 0;
    let mut last = 0.0f64;
    for pair in window.windows(2) {
        let d = pair[1] - pair[0];
        if d != 0.0 {
            if last != 0.0 && d.signum() != last.signum() {
                reversals += 1;
            }
            last = d;
        }
    }
    if reversals < 2 {
        return Ok(Amplitude {
            value: 0.0,
            oscillating: false,
        });
    }
    let (min, max) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(Amplitude {
        value: max - min,
        oscillating: true,
    })
}

pub fn default_burn_in(steps: usize) -> usize {
    (steps as f64 * DEFAULT_BURN_IN) as usize
}

/// `w*` placed `d_over_s` grid steps below the upper level of the bin that
/// holds `base.w_star`.
pub fn problem_at_distance(base: &ToyProblem, d_over_s: f64) -> ToyProblem {
    let (_, up, _) = base.levels();
    ToyProblem {
        w_star: up - d_over_s * base.scale,
        ..*base
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrequencyPoint {
    pub d_over_s: f64,
    pub frequency: f64,
}

/// Measured frequency for each relative distance of `w*` to the grid.
pub fn frequency_sweep(base: &ToyProblem, distances: &[f64]) -> Result<Vec<FrequencyPoint>> {
    distances
        .par_iter()
        .map(|&d| {
            let problem = problem_at_distance(base, d);
            let traj = simulate_trajectory(&problem)?;
            let frequency = measure_frequency(&traj.ints, default_burn_in(problem.steps))?;
            Ok(FrequencyPoint { d_over_s: d, frequency })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LrPoint {
    pub lr: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

/// Amplitude and frequency for each learning rate on a fixed problem.
pub fn lr_sweep(base: &ToyProblem, lrs: &[f64]) -> Result<Vec<LrPoint>> {
    lrs.par_iter()
        .map(|&lr| {
            let problem = ToyProblem { lr, ..*base };
            let traj = simulate_trajectory(&problem)?;
            let burn = default_burn_in(problem.steps);
            Ok(LrPoint {
                lr,
                amplitude: measure_amplitude(&traj.latent, burn)?.value,
                frequency: measure_frequency(&traj.ints, burn)?,
            })
        })
        .collect()
}

/// Ordinary least-squares line `y = slope x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Invalid("line fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("line fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn frequency_sweep_csv(points: &[FrequencyPoint]) -> String {
    let mut out = String::from("d_over_s,frequency\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.d_over_s, p.frequency));
    }
    out
}

pub fn lr_sweep_csv(points: &[LrPoint]) -> String {
    let mut out = String::from("lr,amplitude,frequency\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.lr, p.amplitude, p.frequency));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_level(w_star: f64, lr: f64) -> ToyProblem {
        ToyProblem {
            w_star,
            lr,
            ..ToyProblem::default()
        }
    }

    #[test]
    fn gradient_examples() {
        let p = two_level(0.4, 0.1);
        assert!((toy_gradient(0.6, &p).unwrap() - 0.6).abs() < 1e-15);
        let on_grid = two_level(1.0, 0.1);
        assert_eq!(toy_gradient(0.9, &on_grid).unwrap(), 0.0);
        let wide = ToyProblem { sigma2: 4.0, ..p };
        assert!((toy_gradient(0.6, &wide).unwrap() - 4.0 * 0.6).abs() < 1e-15);
        // clipped weights get no gradient
        assert_eq!(toy_gradient(100.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_examples() {
        let ste = two_level(0.4, 0.1);
        assert!((closed_form_update(0.6, &ste).unwrap() - 0.54).abs() < 1e-15);
        let psg = ToyProblem {
            estimator: EstimatorKind::Psg { epsilon: 0.01 },
            ..ste
        };
        assert!((closed_form_update(0.6, &psg).unwrap() - 0.5754).abs() < 1e-15);
        let damp = ToyProblem { lambda: 0.5, ..ste };
        assert!((closed_form_update(0.6, &damp).unwrap() - 0.58).abs() < 1e-15);
        assert!(closed_form_update(3.0, &ste).is_err());
        assert!(closed_form_update(0.6, &ToyProblem { sigma2: 2.0, ..ste }).is_err());
    }

    #[test]
    fn closed_form_accepts_top_of_grid() {
        // 6s + s rounds above 7s for this scale
        let p = ToyProblem {
            w_star: 2.3373557865787062,
            scale: 0.34195139547369574,
            n: -8,
            p: 7,
            ..two_level(0.4, 0.1)
        };
        let (down, up, _) = p.levels();
        assert!(up > p.grid_range().1);
        let w = 0.5 * (down + up) - 0.01;
        assert!((closed_form_update(w, &p).unwrap() - autodiff_step(w, &p).unwrap()).abs() < 1e-12);
        assert!(closed_form_update(w, &ToyProblem { w_star: 2.5, ..p }).is_err());
    }

    #[test]
    fn autodiff_step_matches_rows() {
        for est in [
            EstimatorKind::Ste,
            EstimatorKind::Psg { epsilon: 0.01 },
            EstimatorKind::Ewgs { delta: 0.3 },
        ] {
            let p = ToyProblem {
                estimator: est,
                ..two_level(0.37, 0.15)
            };
            for w in [0.05, 0.3, 0.49, 0.51, 0.8, 0.99] {
                let a = autodiff_step(w, &p).unwrap();
                let b = closed_form_update(w, &p).unwrap();
                assert!((a - b).abs() < 1e-12, "{est:?} w={w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ste_keeps_oscillating() {
        let traj = simulate_trajectory(&ToyProblem::default()).unwrap();
        assert!(traj.changes_in_tail(0.2) > 0);
        assert!(traj.tracker.frequencies()[0] > 0.0);
    }

    #[test]
    fn strong_dampening_settles() {
        let p = ToyProblem {
            lambda: 1.0,
            ..ToyProblem::default()
        };
        let traj = simulate_trajectory(&p).unwrap();
        assert_eq!(traj.changes_in_tail(0.2), 0);
        assert!(measure_amplitude(&traj.latent, 2000).unwrap().value == 0.0);
    }

    #[test]
    fn frequency_at_threshold_and_on_grid() {
        let base = ToyProblem::default();
        let half = simulate_trajectory(&problem_at_distance(&base, 0.5)).unwrap();
        assert!((measure_frequency(&half.ints, 2000).unwrap() - 0.5).abs() <= 0.02);
        let quarter = simulate_trajectory(&problem_at_distance(&base, 0.25)).unwrap();
        assert!((measure_frequency(&quarter.ints, 2000).unwrap() - 0.25).abs() <= 0.03);
        let zero = simulate_trajectory(&problem_at_distance(&base, 0.0)).unwrap();
        assert_eq!(measure_frequency(&zero.ints, 2000).unwrap(), 0.0);
    }

    #[test]
    fn frequency_needs_enough_points() {
        assert!(measure_frequency(&[1, 2, 1], 5).is_err());
    }

    #[test]
    fn variance_rescaling_preserves_trajectory() {
        let p = ToyProblem::default();
        let q = ToyProblem {
            sigma2: 4.0,
            lr: p.lr / 4.0,
            ..p
        };
        let a = simulate_trajectory(&p).unwrap();
        let b = simulate_trajectory(&q).unwrap();
        assert_eq!(a.ints, b.ints);
    }

    #[test]
    fn divergence_is_reported() {
        // a single step with a huge dampening term throws the weight far
        // outside the grid
        let p = ToyProblem {
            lambda: 1000.0,
            lr: 1.0,
            ..ToyProblem::default()
        };
        assert!(matches!(simulate_trajectory(&p), Err(Error::Diverged(_))));
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let outside = ToyProblem {
            w_star: 100.0,
            ..ToyProblem::default()
        };
        assert!(outside.validate().is_err());
        let ewgs = ToyProblem {
            estimator: EstimatorKind::Ewgs { delta: 2.5 },
            ..ToyProblem::default()
        };
        assert!(ewgs.validate().is_err());
    }

    #[test]
    fn line_fit() {
        let (m, b) = fit_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }
}
