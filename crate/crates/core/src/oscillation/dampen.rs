use serde::{Deserialize, Serialize};

use crate::autodiff::Op;
use crate::error::{Error, Result};
use crate::quant::QuantizerState;
use crate::schedule::CosineSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampenConfig {
    pub lambda: CosineSchedule,
}

impl DampenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.start < 0.0 || self.lambda.end < 0.0 {
            return Err(Error::Config("dampening strength must be non-negative".into()));
        }
        Ok(())
    }
}

/// `lambda * ||q(w) - clip(w, s n, s p)||^2` and its gradient with the
/// quantized target held constant: `2 lambda (w - q(w))` inside the grid,
/// zero for clipped weights.
pub fn dampen_loss(w: &Tensor, q: &QuantizerState, lambda: f64) -> Result<(f64, Tensor)> {
    if lambda < 0.0 {
        return Err(Error::Config(format!(
            "dampening strength must be non-negative, got {lambda}"
        )));
    }
    let (lo, hi) = (q.scale * q.n as f64, q.scale * q.p as f64);
    let mut loss = 0.0;
    let grad = w.map(|v| {
        let (_, target) = q.quantize(v);
        let d = target - v.clamp(lo, hi);
        loss += d * d;
        if lo <= v && v <= hi {
            2.0 * lambda * (v - target)
        } else {
            0.0
        }
    });
    Ok((lambda * loss, grad))
}

/// Graph node for [`dampen_loss`]. Inputs: latent tensor and `[1]` scale.
/// The scale receives no gradient.
pub struct DampenPenalty {
    pub state: QuantizerState,
    pub lambda: f64,
}

impl Op for DampenPenalty {
    fn name(&self) -> &'static str {
        "dampen_penalty"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [_, s] if *s == [1] => Ok(vec![1]),
            [w, s] => Err(Error::shape("dampen_penalty", w, s)),
            _ => Err(Error::Invalid("dampen_penalty takes latent and scale".into())),
        }
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let q = QuantizerState {
            scale: x[1].item(),
            ..self.state
        };
        Ok(Tensor::scalar(dampen_loss(x[0], &q, self.lambda)?.0))
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let q = QuantizerState {
            scale: x[1].item(),
            ..self.state
        };
        let (_, grad) = dampen_loss(x[0], &q, self.lambda)?;
        let upstream = g.item();
        Ok(vec![grad.map(|v| v * upstream), Tensor::scalar(0.0)])
    }
}
