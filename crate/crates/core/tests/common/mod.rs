//! Finite-difference gradient checks shared by the integration tests.

#![allow(dead_code)]

use osc_qat::autodiff::ops::*;
use osc_qat::autodiff::{Graph, Op};
use osc_qat::kernels::ConvGeometry;
use osc_qat::oscillation::DampenPenalty;
use osc_qat::quant::QuantizerState;
use osc_qat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale of it.
pub const FD_FLOOR: f64 = 1e-2;
pub const INSTANCES: usize = 100;
/// Elements probed per input tensor and instance.
const PROBES: usize = 12;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Tensor whose entries stay at least `margin` away from every kink.
fn avoiding(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            data.push(v);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error between graph gradients of `sum(c * op(inputs))`
/// and central differences, over a random subset of input elements.
pub fn check_op<O: Op + 'static>(make: impl Fn() -> O, inputs: &[Tensor], diff: &[bool], rng: &mut ChaCha8Rng) -> f64 {
    let op = make();
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = op.forward(&refs).unwrap();
    let c = random_tensor(rng, out.shape(), -1.0, 1.0);
    let objective = |xs: &[Tensor]| -> f64 {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let y = op.forward(&refs).unwrap();
        y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = g.apply(make(), &leaves).unwrap();
    let cn = g.constant(c.clone());
    let prod = g.apply(Mul, &[y, cn]).unwrap();
    let root = g.apply(Sum, &[prod]).unwrap();
    g.forward(root).unwrap();
    let grads = g.backward(root).unwrap();

    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        if !diff[k] {
            continue;
        }
        let analytic = grads.get(*leaf).expect("gradient for every input");
        for _ in 0..PROBES.min(inputs[k].len()) {
            let i = rng.random_range(0..inputs[k].len());
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

fn rvec(rng: &mut ChaCha8Rng, max_len: usize) -> Tensor {
    let n = dim(rng, 1, max_len);
    random_tensor(rng, &[n], -2.0, 2.0)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub struct Check {
    pub name: &'static str,
    pub worst: f64,
}

fn run(name: &'static str, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..INSTANCES).map(|_| one(&mut rng)).fold(0.0, f64::max);
    Check { name, worst }
}

fn conv_case(rng: &mut ChaCha8Rng, groups_mode: u8) -> f64 {
    let n = dim(rng, 1, 3);
    let k = [1, 3][dim(rng, 0, 1)];
    let stride = dim(rng, 1, 2);
    let (c, o, groups) = match groups_mode {
        0 => (dim(rng, 1, 3), dim(rng, 1, 4), 1),
        1 => {
            let c = dim(rng, 1, 4);
            (c, c, c)
        }
        _ => (dim(rng, 1, 4), dim(rng, 1, 4), 1),
    };
    let k = if groups_mode == 2 { 1 } else { k };
    let h = dim(rng, k.max(2), 6);
    let w = dim(rng, k.max(2), 6);
    let geom = ConvGeometry {
        stride,
        pad: k / 2,
        groups,
    };
    let x = random_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let wt = random_tensor(rng, &[o, c / groups, k, k], -1.0, 1.0);
    check_op(|| Conv2d(geom), &[x, wt], &[true, true], rng)
}

/// One entry per layer backward and for the dampening gradient.
pub fn gradient_suite() -> Vec<Check> {
    vec![
        run("add", 1, |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            check_op(
                || Add,
                &[random_tensor(r, &s, -2.0, 2.0), random_tensor(r, &s, -2.0, 2.0)],
                &[true, true],
                r,
            )
        }),
        run("sub", 2, |r| {
            let s = [dim(r, 1, 5)];
            check_op(
                || Sub,
                &[random_tensor(r, &s, -2.0, 2.0), random_tensor(r, &s, -2.0, 2.0)],
                &[true, true],
                r,
            )
        }),
        run("mul", 3, |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 3)];
            check_op(
                || Mul,
                &[random_tensor(r, &s, -2.0, 2.0), random_tensor(r, &s, -2.0, 2.0)],
                &[true, true],
                r,
            )
        }),
        run("scale", 4, |r| {
            let a = r.random_range(-3.0..3.0);
            check_op(move || Scale(a), &[rvec(r, 6)], &[true], r)
        }),
        run("square", 5, |r| check_op(|| Square, &[rvec(r, 6)], &[true], r)),
        run("sum", 6, |r| check_op(|| Sum, &[rvec(r, 6)], &[true], r)),
        run("mean", 7, |r| check_op(|| Mean, &[rvec(r, 6)], &[true], r)),
        run("matmul", 8, |r| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            check_op(
                || MatMul,
                &[
                    random_tensor(r, &[m, k], -1.0, 1.0),
                    random_tensor(r, &[k, n], -1.0, 1.0),
                ],
                &[true, true],
                r,
            )
        }),
        run("linear", 9, |r| {
            let (n, i, o) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            check_op(
                || Linear,
                &[
                    random_tensor(r, &[n, i], -1.0, 1.0),
                    random_tensor(r, &[o, i], -1.0, 1.0),
                    random_tensor(r, &[o], -1.0, 1.0),
                ],
                &[true, true, true],
                r,
            )
        }),
        run("relu", 10, |r| {
            check_op(
                || Relu,
                &[{
                    let n = dim(r, 1, 8);
                    avoiding(r, &[n], -2.0, 2.0, &[0.0], 1e-3)
                }],
                &[true],
                r,
            )
        }),
        run("relu6", 11, |r| {
            check_op(
                || Relu6,
                &[{
                    let n = dim(r, 1, 8);
                    avoiding(r, &[n], -2.0, 8.0, &[0.0, 6.0], 1e-3)
                }],
                &[true],
                r,
            )
        }),
        run("conv2d", 12, |r| conv_case(r, 0)),
        run("conv2d_depthwise", 13, |r| conv_case(r, 1)),
        run("conv2d_pointwise", 14, |r| conv_case(r, 2)),
        run("batch_norm_train", 15, |r| {
            let (n, c, h, w) = (dim(r, 2, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            check_op(
                || BatchNormTrain { eps: 1e-5 },
                &[
                    random_tensor(r, &[n, c, h, w], -2.0, 2.0),
                    random_tensor(r, &[c], 0.5, 1.5),
                    random_tensor(r, &[c], -0.5, 0.5),
                ],
                &[true, true, true],
                r,
            )
        }),
        run("batch_norm_eval", 16, |r| {
            let (n, c) = (dim(r, 1, 3), dim(r, 1, 3));
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
            check_op(
                move || BatchNormEval {
                    mean: mean.clone(),
                    var: var.clone(),
                    eps: 1e-5,
                },
                &[
                    random_tensor(r, &[n, c, 2, 2], -2.0, 2.0),
                    random_tensor(r, &[c], 0.5, 1.5),
                    random_tensor(r, &[c], -0.5, 0.5),
                ],
                &[true, true, true],
                r,
            )
        }),
        run("global_avg_pool", 17, |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
            check_op(|| GlobalAvgPool, &[random_tensor(r, &s, -2.0, 2.0)], &[true], r)
        }),
        run("reshape", 18, |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            check_op(
                move || Reshape(vec![b, a]),
                &[random_tensor(r, &[a, b], -2.0, 2.0)],
                &[true],
                r,
            )
        }),
        run("softmax_cross_entropy", 19, |r| {
            let (n, k) = (dim(r, 1, 4), dim(r, 2, 5));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            check_op(
                move || SoftmaxCrossEntropy { labels: labels.clone() },
                &[random_tensor(r, &[n, k], -3.0, 3.0)],
                &[true],
                r,
            )
        }),
        run("dampen_penalty", 20, |r| {
            let bits = dim(r, 2, 4) as u32;
            let s = r.random_range(0.05..1.0);
            let state = QuantizerState::new(bits, true, s).unwrap();
            let lambda = r.random_range(0.0..2.0);
            // latent weights away from decision thresholds and grid edges,
            // where the quantized target is locally constant
            let n = dim(r, 1, 8);
            let mut data = Vec::with_capacity(n);
            while data.len() < n {
                let v: f64 = r.random_range((state.n as f64 - 1.5) * s..(state.p as f64 + 1.5) * s);
                let frac = (v / s).rem_euclid(1.0);
                let edge = (v - state.n as f64 * s).abs().min((v - state.p as f64 * s).abs());
                if (frac - 0.5).abs() > 1e-3 && edge > 1e-3 * s {
                    data.push(v);
                }
            }
            let w = Tensor::from_vec(data);
            check_op(
                move || DampenPenalty { state, lambda },
                &[w, Tensor::scalar(s)],
                &[true, false],
                r,
            )
        }),
    ]
}
