//! SGD with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate, momentum and one velocity buffer per parameter slot.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, slot: usize) -> Option<&Tensor> {
        self.velocity.get(slot).and_then(|v| v.as_ref())
    }

    /// `v <- momentum * v + g; w <- w - lr * v` for every slot.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.step_slot(slot, p, g, None)?;
        }
        Ok(())
    }

    /// Updates one parameter slot; elements where `frozen` is true keep both
    /// their value and their velocity.
    pub fn step_slot(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, frozen: Option<&[bool]>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter slot {slot}")));
        }
        if let Some(mask) = frozen {
            if mask.len() != param.len() {
                return Err(Error::shape("sgd_step mask", &[mask.len()], param.shape()));
            }
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let v = self.velocity[slot].get_or_insert_with(|| Tensor::zeros(param.shape()));
        if v.shape() != param.shape() {
            return Err(Error::shape("sgd_step velocity", v.shape(), param.shape()));
        }
        let (lr, mom) = (self.lr, self.momentum);
        for (i, ((w, vel), g)) in param
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(grad.data())
            .enumerate()
        {
            if frozen.is_some_and(|m| m[i]) {
                continue;
            }
            *vel = mom * *vel + g;
            *w -= lr * *vel;
        }
        Ok(())
    }
}
