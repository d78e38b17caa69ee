//! Built-in differentiable primitives.

use super::Op;
use crate::error::{Error, Result};
use crate::kernels::{self, channel_layout, ConvGeometry};
use crate::tensor::Tensor;

fn same_shape(op: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    match inputs {
        [a, b] if a == b => Ok(a.to_vec()),
        [a, b] => Err(Error::shape(op, a, b)),
        _ => Err(Error::Invalid(format!("{op} takes two inputs"))),
    }
}

fn unary(op: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    match inputs {
        [a] => Ok(a.to_vec()),
        _ => Err(Error::Invalid(format!("{op} takes one input"))),
    }
}

pub struct Add;

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        same_shape("add", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        x[0].zip_map(x[1], |a, b| a + b)
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.clone(), g.clone()])
    }
}

pub struct Sub;

impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        same_shape("sub", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        x[0].zip_map(x[1], |a, b| a - b)
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.clone(), g.map(|v| -v)])
    }
}

/// Element-wise product.
pub struct Mul;

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        same_shape("mul", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        x[0].zip_map(x[1], |a, b| a * b)
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.zip_map(x[1], |g, b| g * b)?, g.zip_map(x[0], |g, a| g * a)?])
    }
}

/// Multiplication by a fixed constant.
pub struct Scale(pub f64);

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        unary("scale", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v * self.0))
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.map(|v| v * self.0)])
    }
}

pub struct Square;

impl Op for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        unary("square", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v * v))
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.zip_map(x[0], |g, v| 2.0 * v * g)?])
    }
}

/// Sum of all elements, shape `[1]`.
pub struct Sum;

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        unary("sum", inputs).map(|_| vec![1])
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(x[0].sum()))
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::full(x[0].shape(), g.item())])
    }
}

/// Mean of all elements, shape `[1]`.
pub struct Mean;

impl Op for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        unary("mean", inputs).map(|_| vec![1])
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(x[0].sum() / x[0].len() as f64))
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::full(x[0].shape(), g.item() / x[0].len() as f64)])
    }
}

pub struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [a, b] if a.len() == 2 && b.len() == 2 && a[1] == b[0] => Ok(vec![a[0], b[1]]),
            [a, b] => Err(Error::shape("matmul", a, b)),
            _ => Err(Error::Invalid("matmul takes two inputs".into())),
        }
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        kernels::matmul(x[0], x[1])
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let ga = kernels::matmul(g, &kernels::transpose(x[1])?)?;
        let gb = kernels::matmul(&kernels::transpose(x[0])?, g)?;
        Ok(vec![ga, gb])
    }
}

/// Fully connected layer `x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub struct Linear;

impl Op for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [x, w, b] if x.len() == 2 && w.len() == 2 && x[1] == w[1] && b == &[w[0]] => Ok(vec![x[0], w[0]]),
            [x, w, _] => Err(Error::shape("linear", x, w)),
            _ => Err(Error::Invalid("linear takes x, weight, bias".into())),
        }
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        linear_forward(x[0], x[1], x[2])
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let gx = kernels::matmul(g, x[1])?;
        let gw = kernels::matmul(&kernels::transpose(g)?, x[0])?;
        let (n, o) = (g.shape()[0], g.shape()[1]);
        let mut gb = vec![0.0; o];
        for row in g.data().chunks(o).take(n) {
            for (b, &v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
        Ok(vec![gx, gw, Tensor::from_vec(gb)])
    }
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = kernels::matmul(x, &kernels::transpose(w)?)?;
    let o = w.shape()[0];
    if b.len() != o {
        return Err(Error::shape("linear bias", b.shape(), &[o]));
    }
    for row in y.data_mut().chunks_mut(o) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

pub struct Relu;

impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        unary("relu", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v.max(0.0)))
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.zip_map(x[0], |g, v| if v > 0.0 { g } else { 0.0 })?])
    }
}

pub struct Relu6;

impl Op for Relu6 {
    fn name(&self) -> &'static str {
        "relu6"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        unary("relu6", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v.clamp(0.0, 6.0)))
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.zip_map(x[0], |g, v| if v > 0.0 && v < 6.0 { g } else { 0.0 })?])
    }
}

pub struct Conv2d(pub ConvGeometry);

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [x, w] => kernels::conv2d_output_shape(x, w, self.0),
            _ => Err(Error::Invalid("conv2d takes input and weight".into())),
        }
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        kernels::conv2d(x[0], x[1], self.0)
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let (gx, gw) = kernels::conv2d_backward(g, x[0], x[1], self.0)?;
        Ok(vec![gx, gw])
    }
}

fn bn_shapes(op: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    match inputs {
        [x, gamma, beta] => {
            let (_, c, _) = channel_layout(x)?;
            if gamma != &[c] || beta != &[c] {
                return Err(Error::shape(op, x, gamma));
            }
            Ok(x.to_vec())
        }
        _ => Err(Error::Invalid(format!("{op} takes x, gamma, beta"))),
    }
}

/// Batch normalization using the statistics of the current batch.
/// Inputs: `x` (`[N, C]` or `[N, C, H, W]`), `gamma [C]`, `beta [C]`.
pub struct BatchNormTrain {
    pub eps: f64,
}

impl Op for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        bn_shapes("batch_norm_train", inputs)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let (mean, var) = kernels::channel_moments(x[0])?;
        affine_normalize(x[0], &mean, &var, self.eps, x[1], x[2])
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let (n, c, hw) = channel_layout(x[0].shape())?;
        let (mean, var) = kernels::channel_moments(x[0])?;
        let m = (n * hw) as f64;
        let (xd, gd) = (x[0].data(), g.data());
        let gamma = x[1].data();
        let mut gx = vec![0.0; xd.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            let (mut sg, mut sgx) = (0.0, 0.0);
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xhat = (xd[k] - mean[ch]) * inv;
                    sg += gd[k];
                    sgx += gd[k] * xhat;
                }
            }
            ggamma[ch] = sgx;
            gbeta[ch] = sg;
            let scale = gamma[ch] * inv / m;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xhat = (xd[k] - mean[ch]) * inv;
                    gx[k] = scale * (m * gd[k] - sg - xhat * sgx);
                }
            }
        }
        Ok(vec![
            Tensor::new(x[0].shape().to_vec(), gx)?,
            Tensor::from_vec(ggamma),
            Tensor::from_vec(gbeta),
        ])
    }
}

/// Batch normalization with fixed (running) statistics.
pub struct BatchNormEval {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl Op for BatchNormEval {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let out = bn_shapes("batch_norm_eval", inputs)?;
        let (_, c, _) = channel_layout(&out)?;
        if self.mean.len() != c || self.var.len() != c {
            return Err(Error::shape("batch_norm_eval stats", &[self.mean.len()], &[c]));
        }
        Ok(out)
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        affine_normalize(x[0], &self.mean, &self.var, self.eps, x[1], x[2])
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let (n, c, hw) = channel_layout(x[0].shape())?;
        let (xd, gd) = (x[0].data(), g.data());
        let mut gx = vec![0.0; xd.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ch in 0..c {
            let inv = 1.0 / (self.var[ch] + self.eps).sqrt();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    gx[k] = gd[k] * x[1].data()[ch] * inv;
                    ggamma[ch] += gd[k] * (xd[k] - self.mean[ch]) * inv;
                    gbeta[ch] += gd[k];
                }
            }
        }
        Ok(vec![
            Tensor::new(x[0].shape().to_vec(), gx)?,
            Tensor::from_vec(ggamma),
            Tensor::from_vec(gbeta),
        ])
    }
}

pub fn affine_normalize(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let (n, c, hw) = channel_layout(x.shape())?;
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for v in &mut d[base..base + hw] {
                *v = (*v - mean[ch]) * inv * gm + bt;
            }
        }
    }
    Ok(out)
}

/// `[N, C, H, W] -> [N, C]`
pub struct GlobalAvgPool;

impl Op for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [x] if x.len() == 4 => Ok(vec![x[0], x[1]]),
            [x] => Err(Error::Invalid(format!("global_avg_pool needs NCHW, got {x:?}"))),
            _ => Err(Error::Invalid("global_avg_pool takes one input".into())),
        }
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let s = x[0].shape();
        let hw = s[2] * s[3];
        let data = x[0]
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        Tensor::new(vec![s[0], s[1]], data)
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let s = x[0].shape();
        let hw = s[2] * s[3];
        let mut out = Vec::with_capacity(x[0].len());
        for &v in g.data() {
            out.extend(std::iter::repeat_n(v / hw as f64, hw));
        }
        Ok(vec![Tensor::new(s.to_vec(), out)?])
    }
}

/// Reshape to a fixed shape with the same element count.
pub struct Reshape(pub Vec<usize>);

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let [x] = inputs else {
            return Err(Error::Invalid("reshape takes one input".into()));
        };
        if x.iter().product::<usize>() != self.0.iter().product::<usize>() {
            return Err(Error::shape("reshape", x, &self.0));
        }
        Ok(self.0.clone())
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        x[0].clone().reshape(&self.0)
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.clone().reshape(x[0].shape())?])
    }
}

/// Mean softmax cross-entropy of `[N, K]` logits against fixed labels.
pub struct SoftmaxCrossEntropy {
    pub labels: Vec<usize>,
}

pub fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let k = logits.shape()[1];
    let mut p = logits.data().to_vec();
    for row in p.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

impl Op for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match inputs {
            [x] if x.len() == 2 && x[0] == self.labels.len() => {
                if let Some(&bad) = self.labels.iter().find(|&&l| l >= x[1]) {
                    return Err(Error::Invalid(format!("label {bad} out of range for {} classes", x[1])));
                }
                Ok(vec![1])
            }
            [x] => Err(Error::shape("softmax_cross_entropy", x, &[self.labels.len()])),
            _ => Err(Error::Invalid("softmax_cross_entropy takes one input".into())),
        }
    }
    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let k = x[0].shape()[1];
        let p = softmax_rows(x[0]);
        let loss: f64 = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(p[i * k + l].max(1e-300)).ln())
            .sum();
        Ok(Tensor::scalar(loss / self.labels.len() as f64))
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let k = x[0].shape()[1];
        let n = self.labels.len() as f64;
        let mut p = softmax_rows(x[0]);
        for (i, &l) in self.labels.iter().enumerate() {
            p[i * k + l] -= 1.0;
        }
        let scale = g.item() / n;
        Ok(vec![Tensor::new(
            x[0].shape().to_vec(),
            p.into_iter().map(|v| v * scale).collect(),
        )?])
    }
}
