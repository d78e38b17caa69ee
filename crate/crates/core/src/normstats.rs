//! Batch-normalization statistics: running EMA, exact re-estimation
//! accumulators and the Gaussian KL drift diagnostic.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::affine_normalize;
use crate::error::{Error, Result};
use crate::kernels::channel_layout;
use crate::tensor::Tensor;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-channel running mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl NormStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `mu <- (1 - mom) mu + mom mu_batch`, same for the variance.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = ((1.0 - m) * *r + m * b).max(VARIANCE_FLOOR);
        }
    }

    /// Replaces the running statistics outright.
    pub fn set(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        self.mean = mean;
        self.var = var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
    }
}

/// Per-channel mean and unbiased variance of a batch.
pub fn batch_statistics(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, _, hw) = channel_layout(x.shape())?;
    let count = n * hw;
    if count < 2 {
        return Err(Error::Invalid(
            "batch statistics need at least two values per channel".into(),
        ));
    }
    let (mean, var) = crate::kernels::channel_moments(x)?;
    let correction = count as f64 / (count - 1) as f64;
    Ok((mean, var.into_iter().map(|v| v * correction).collect()))
}

/// Normalizes with the batch statistics and folds them into the running EMA.
pub fn bn_forward_train(x: &Tensor, stats: &mut NormStats, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c, _) = channel_layout(x.shape())?;
    if c != stats.channels() || gamma.len() != c || beta.len() != c {
        return Err(Error::shape("bn_forward_train", x.shape(), &[stats.channels()]));
    }
    let (mean, unbiased) = batch_statistics(x)?;
    let (_, biased) = crate::kernels::channel_moments(x)?;
    let out = affine_normalize(x, &mean, &biased, BN_EPS, gamma, beta)?;
    stats.update_running(&mean, &unbiased);
    Ok(out)
}

/// Exact streaming per-channel mean/variance over many batches
/// (pairwise combination of count, mean and sum of squared deviations).
#[derive(Clone, Debug)]
pub struct ChannelAccumulator {
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelAccumulator {
    pub fn new(channels: usize) -> Self {
        ChannelAccumulator {
            count: vec![0.0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn add(&mut self, x: &Tensor) -> Result<()> {
        let (n, c, hw) = channel_layout(x.shape())?;
        if c != self.mean.len() {
            return Err(Error::shape("channel accumulator", x.shape(), &[self.mean.len()]));
        }
        let (bm, bv) = crate::kernels::channel_moments(x)?;
        let nb = (n * hw) as f64;
        for ch in 0..c {
            let na = self.count[ch];
            let total = na + nb;
            let delta = bm[ch] - self.mean[ch];
            self.mean[ch] += delta * nb / total;
            self.m2[ch] += bv[ch] * nb + delta * delta * na * nb / total;
            self.count[ch] = total;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.count.iter().all(|&c| c == 0.0)
    }

    /// Mean and population variance.
    pub fn finish(&self) -> (Vec<f64>, Vec<f64>) {
        let var = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, n)| if *n > 0.0 { m2 / n } else { 0.0 })
            .collect();
        (self.mean.clone(), var)
    }
}

/// A univariate normal by mean and variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn from_std(mean: f64, std: f64) -> Self {
        Gaussian { mean, var: std * std }
    }
}

/// `log(s2^2 / s1^2) + (s1^2 + (mu1 - mu2)^2) / (2 s2^2) - 1/2` between the
/// population `p` and the running estimate `q`.
///
/// Note the log term is not halved, so the value can dip below zero (down to
/// `1/2 - ln 2`) when the estimate's variance is less than half the
/// population's.
pub fn kl_drift(population: Gaussian, estimate: Gaussian) -> Result<f64> {
    if !(population.var > 0.0 && estimate.var > 0.0) {
        return Err(Error::Invalid(format!(
            "KL drift needs positive variances, got {} and {}",
            population.var, estimate.var
        )));
    }
    let (v1, v2) = (population.var, estimate.var);
    let dm = population.mean - estimate.mean;
    Ok((v2 / v1).ln() + (v1 + dm * dm) / (2.0 * v2) - 0.5)
}

/// Max and mean drift across the output channels of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub max: f64,
    pub mean: f64,
}

pub fn kl_summary(pop_mean: &[f64], pop_var: &[f64], est_mean: &[f64], est_var: &[f64]) -> Result<KlSummary> {
    let c = pop_mean.len();
    if [pop_var.len(), est_mean.len(), est_var.len()].iter().any(|&l| l != c) || c == 0 {
        return Err(Error::Invalid(
            "KL summary needs matching non-empty channel vectors".into(),
        ));
    }
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for ch in 0..c {
        let d = kl_drift(
            Gaussian {
                mean: pop_mean[ch],
                var: pop_var[ch].max(VARIANCE_FLOOR),
            },
            Gaussian {
                mean: est_mean[ch],
                var: est_var[ch].max(VARIANCE_FLOOR),
            },
        )?;
        max = max.max(d);
        sum += d;
    }
    Ok(KlSummary {
        max,
        mean: sum / c as f64,
    })
}
