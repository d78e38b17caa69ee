//! Simulated uniform quantization with a learned per-tensor scale.
//!
//! The forward pass is `s * clip(round(w / s), n, p)` with ties rounded
//! half-to-even. Backward rules are the straight-through estimator and
//! three multiplicative rescalings of it (EWGS, PSG, DSQ-style).

use serde::{Deserialize, Serialize};

use crate::autodiff::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EWGS_DELTA: f64 = 0.2;
pub const DEFAULT_PSG_EPSILON: f64 = 1e-3;
pub const DEFAULT_DSQ_TEMPERATURE: f64 = 4.0;

/// Backward rule used for the rounding operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorKind {
    Ste,
    /// `g * (1 + delta * sign(g) * (w - q(w)))`
    Ewgs {
        #[serde(default = "default_delta")]
        delta: f64,
    },
    /// `g * (|w - q(w)| + epsilon)`
    Psg {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// Derivative of a tanh soft-step centered on each decision threshold.
    Dsq {
        #[serde(default = "default_temperature")]
        k: f64,
    },
}

fn default_delta() -> f64 {
    DEFAULT_EWGS_DELTA
}
fn default_epsilon() -> f64 {
    DEFAULT_PSG_EPSILON
}
fn default_temperature() -> f64 {
    DEFAULT_DSQ_TEMPERATURE
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorKind::Ste => Ok(()),
            EstimatorKind::Ewgs { delta } if delta >= 0.0 && delta.is_finite() => Ok(()),
            EstimatorKind::Psg { epsilon } if epsilon > 0.0 && epsilon.is_finite() => Ok(()),
            EstimatorKind::Dsq { k } if k > 0.0 && k.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid estimator parameters: {other:?}"))),
        }
    }

    /// In-range multiplier applied to the STE gradient `g` for latent `w`
    /// with quantized value `w_hat` and scale `s`.
    pub fn multiplier(&self, g: f64, w: f64, w_hat: f64, s: f64) -> f64 {
        match *self {
            EstimatorKind::Ste => 1.0,
            EstimatorKind::Ewgs { delta } => 1.0 + delta * sign(g) * (w - w_hat),
            EstimatorKind::Psg { epsilon } => (w - w_hat).abs() + epsilon,
            EstimatorKind::Dsq { k } => {
                // v = 0 on the decision threshold, +-0.5 on the grid points
                let x = w / s;
                let v = x - x.floor() - 0.5;
                let t = (k * v).tanh();
                k / (2.0 * (k / 2.0).tanh()) * (1.0 - t * t)
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Integer grid `[n, p]` for a `bits`-wide signed or unsigned format.
pub fn grid_bounds(bits: u32, signed: bool) -> Result<(i64, i64)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!("bit-width must be in 2..=16, got {bits}")));
    }
    Ok(if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub scale: f64,
    pub n: i64,
    pub p: i64,
    pub bits: u32,
    pub signed: bool,
    pub scale_trainable: bool,
    pub estimator: EstimatorKind,
}

impl QuantizerState {
    pub fn new(bits: u32, signed: bool, scale: f64) -> Result<Self> {
        let (n, p) = grid_bounds(bits, signed)?;
        let q = QuantizerState {
            scale,
            n,
            p,
            bits,
            signed,
            scale_trainable: true,
            estimator: EstimatorKind::Ste,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_estimator(mut self, estimator: EstimatorKind) -> Result<Self> {
        estimator.validate()?;
        self.estimator = estimator;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.n >= self.p {
            return Err(Error::Config(format!("need n < p, got [{}, {}]", self.n, self.p)));
        }
        self.estimator.validate()
    }

    /// `(w_int, w_hat)` for one latent value.
    #[inline]
    pub fn quantize(&self, w: f64) -> (i64, f64) {
        let k = (w / self.scale).round_ties_even().clamp(self.n as f64, self.p as f64);
        (k as i64, self.scale * k)
    }

    #[inline]
    pub fn in_range(&self, w: f64) -> bool {
        let x = w / self.scale;
        self.n as f64 <= x && x <= self.p as f64
    }
}

/// Simulated quantization of a whole tensor.
pub fn quantize_forward(w: &Tensor, q: &QuantizerState) -> Result<(Tensor, Vec<i64>)> {
    if q.scale.is_nan() || q.scale <= 0.0 {
        return Err(Error::Config(format!("scale must be positive, got {}", q.scale)));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let mut ints = Vec::with_capacity(w.len());
    let w_hat = w.map(|v| {
        let (k, wh) = q.quantize(v);
        ints.push(k);
        wh
    });
    Ok((w_hat, ints))
}

/// Straight-through gradient: pass `g_out` where `n <= w/s <= p`, zero elsewhere.
pub fn ste_backward(g_out: &Tensor, w: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    g_out.zip_map(w, |g, v| if q.in_range(v) { g } else { 0.0 })
}

/// STE gradient rescaled by the configured estimator.
pub fn estimator_backward(g_out: &Tensor, w: &Tensor, w_hat: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    if w.shape() != w_hat.shape() {
        return Err(Error::shape("estimator_backward", w.shape(), w_hat.shape()));
    }
    if let EstimatorKind::Ewgs { delta } = q.estimator {
        // |w - q(w)| <= s/2 in range, so the multiplier stays positive iff delta*s/2 < 1
        if delta * q.scale / 2.0 >= 1.0 {
            return Err(Error::Config(format!(
                "EWGS delta {delta} can flip the gradient sign at scale {}",
                q.scale
            )));
        }
    }
    let data = g_out
        .data()
        .iter()
        .zip(w.data())
        .zip(w_hat.data())
        .map(|((&g, &v), &vh)| {
            if q.in_range(v) {
                g * q.estimator.multiplier(g, v, vh, q.scale)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// `d w_hat / d s` for one element (LSQ).
#[inline]
pub fn scale_derivative(w: f64, q: &QuantizerState) -> f64 {
    let x = w / q.scale;
    if x < q.n as f64 {
        q.n as f64
    } else if x > q.p as f64 {
        q.p as f64
    } else {
        x.round_ties_even() - x
    }
}

/// Gradient normalizer `1 / sqrt(N * p)`.
pub fn lsq_normalizer(count: usize, q: &QuantizerState) -> f64 {
    1.0 / ((count as f64) * q.p as f64).sqrt()
}

/// LSQ gradient of the loss with respect to the scale.
pub fn lsq_scale_gradient(g_out: &Tensor, w: &Tensor, q: &QuantizerState) -> Result<f64> {
    if g_out.shape() != w.shape() {
        return Err(Error::shape("lsq_scale_gradient", g_out.shape(), w.shape()));
    }
    let raw: f64 = g_out
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &v)| g * scale_derivative(v, q))
        .sum();
    Ok(raw * lsq_normalizer(w.len(), q))
}

pub const MSE_GRID_POINTS: usize = 100;

/// Quantization error `||w - q(w)||^2` at scale `s`.
pub fn quantization_mse(w: &Tensor, n: i64, p: i64, s: f64) -> f64 {
    w.data()
        .iter()
        .map(|&v| {
            let k = (v / s).round_ties_even().clamp(n as f64, p as f64);
            let e = v - s * k;
            e * e
        })
        .sum()
}

/// Grid search for the scale minimizing quantization MSE over
/// `max|w| / p * c`, `c` in 100 evenly spaced points of `[0.1, 1.2]`.
pub fn mse_range_init(w: &Tensor, bits: u32, signed: bool) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Invalid("cannot initialize a scale from an empty tensor".into()));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("range-estimation input".into()));
    }
    let (n, p) = grid_bounds(bits, signed)?;
    let max = w.max_abs();
    if max == 0.0 {
        return Ok(1.0);
    }
    let base = max / p as f64;
    let mut best = (f64::INFINITY, base);
    for i in 0..MSE_GRID_POINTS {
        // exact rational grid so that c = 1 is hit without rounding error
        let steps = (MSE_GRID_POINTS - 1) as f64;
        let c = (10.0 * (steps - i as f64) + 120.0 * i as f64) / (100.0 * steps);
        let s = base * c;
        let mse = quantization_mse(w, n, p, s);
        if mse < best.0 {
            best = (mse, s);
        }
    }
    Ok(best.1)
}

/// Integer values pinned by iterative freezing.
#[derive(Clone, Debug, Default)]
pub struct FrozenInts {
    pub mask: Vec<bool>,
    pub ints: Vec<i64>,
}

/// Fake-quantization node. Inputs: latent tensor and a `[1]` scale.
///
/// Frozen elements output `s * frozen_int`, receive no latent gradient and
/// contribute `frozen_int` to the scale derivative.
pub struct FakeQuantize {
    pub state: QuantizerState,
    pub frozen: Option<FrozenInts>,
}

impl FakeQuantize {
    fn with_scale(&self, s: f64) -> QuantizerState {
        QuantizerState { scale: s, ..self.state }
    }

    fn frozen_at(&self, i: usize) -> Option<i64> {
        self.frozen.as_ref().and_then(|f| f.mask[i].then(|| f.ints[i]))
    }
}

impl Op for FakeQuantize {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [w, s] if *s == [1] => {
                if let Some(f) = &self.frozen {
                    let n: usize = w.iter().product();
                    if f.mask.len() != n || f.ints.len() != n {
                        return Err(Error::shape("fake_quantize frozen mask", &[f.mask.len()], w));
                    }
                }
                Ok(w.to_vec())
            }
            [w, s] => Err(Error::shape("fake_quantize", w, s)),
            _ => Err(Error::Invalid("fake_quantize takes latent and scale".into())),
        }
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let q = self.with_scale(x[1].item());
        let (mut w_hat, _) = quantize_forward(x[0], &q)?;
        if self.frozen.is_some() {
            for (i, v) in w_hat.data_mut().iter_mut().enumerate() {
                if let Some(k) = self.frozen_at(i) {
                    *v = q.scale * k as f64;
                }
            }
        }
        Ok(w_hat)
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], out: &Tensor) -> Result<Vec<Tensor>> {
        let q = self.with_scale(x[1].item());
        let mut gw = estimator_backward(g, x[0], out, &q)?;
        let mut gs = 0.0;
        for (i, (&gv, &wv)) in g.data().iter().zip(x[0].data()).enumerate() {
            match self.frozen_at(i) {
                Some(k) => {
                    gw.data_mut()[i] = 0.0;
                    gs += gv * k as f64;
                }
                None => gs += gv * scale_derivative(wv, &q),
            }
        }
        let gs = if q.scale_trainable {
            gs * lsq_normalizer(x[0].len(), &q)
        } else {
            0.0
        };
        Ok(vec![gw, Tensor::scalar(gs)])
    }
}
