//! Plain dense kernels shared by the autodiff ops and the graph-free
//! inference path. Tensors are NCHW, weights are `[out, in / groups, kh, kw]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &[usize], w: &[usize], g: ConvGeometry) -> Result<Dims> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape("conv2d", x, w));
    }
    let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
    let (o, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
    if g.groups == 0 || g.stride == 0 || c % g.groups != 0 || o % g.groups != 0 || cg != c / g.groups {
        return Err(Error::shape("conv2d", x, w));
    }
    if h + 2 * g.pad < kh || wd + 2 * g.pad < kw {
        return Err(Error::shape("conv2d", x, w));
    }
    let oh = (h + 2 * g.pad - kh) / g.stride + 1;
    let ow = (wd + 2 * g.pad - kw) / g.stride + 1;
    Ok(Dims {
        n,
        c,
        h,
        w: wd,
        o,
        cg,
        kh,
        kw,
        oh,
        ow,
    })
}

pub fn conv2d_output_shape(x: &[usize], w: &[usize], g: ConvGeometry) -> Result<Vec<usize>> {
    let d = conv_dims(x, w, g)?;
    Ok(vec![d.n, d.o, d.oh, d.ow])
}

/// Output column range `[lo, hi)` for which `ox * stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need ox*stride + k >= pad and ox*stride + k - pad < len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(x.shape(), w.shape(), g)?;
    let og = d.o / g.groups;
    let in_sample = d.c * d.h * d.w;
    let out_sample = d.o * d.oh * d.ow;
    let mut y = vec![0.0; d.n * out_sample];
    let pointwise = d.kh == 1 && d.kw == 1 && g.stride == 1 && g.pad == 0;
    let xd = x.data();
    let wd = w.data();
    y.par_chunks_mut(out_sample.max(1)).enumerate().for_each(|(n, ys)| {
        let xs = &xd[n * in_sample..(n + 1) * in_sample];
        for o in 0..d.o {
            let grp = o / og;
            let yo = &mut ys[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
            for ci in 0..d.cg {
                let c = grp * d.cg + ci;
                let xc = &xs[c * d.h * d.w..(c + 1) * d.h * d.w];
                if pointwise {
                    let wv = wd[o * d.cg + ci];
                    for (y, &xv) in yo.iter_mut().zip(xc) {
                        *y += wv * xv;
                    }
                    continue;
                }
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.h, d.oh, ky, g.stride, g.pad);
                    for kx in 0..d.kw {
                        let wv = wd[((o * d.cg + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(d.w, d.ow, kx, g.stride, g.pad);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * g.stride + kx - g.pad;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &xc[iy * d.w + ix0..(iy + 1) * d.w];
                            let yrow = &mut yo[oy * d.ow + x0..oy * d.ow + x1];
                            if g.stride == 1 {
                                for (y, &xv) in yrow.iter_mut().zip(row) {
                                    *y += wv * xv;
                                }
                            } else {
                                for (y, &xv) in yrow.iter_mut().zip(row.iter().step_by(g.stride)) {
                                    *y += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![d.n, d.o, d.oh, d.ow], y)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(grad: &Tensor, x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(x.shape(), w.shape(), g)?;
    if grad.shape() != [d.n, d.o, d.oh, d.ow] {
        return Err(Error::shape("conv2d_backward", grad.shape(), &[d.n, d.o, d.oh, d.ow]));
    }
    let og = d.o / g.groups;
    let in_sample = d.c * d.h * d.w;
    let out_sample = d.o * d.oh * d.ow;
    let wlen = w.len();
    let pointwise = d.kh == 1 && d.kw == 1 && g.stride == 1 && g.pad == 0;
    let xd = x.data();
    let wd = w.data();
    let gd = grad.data();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let xs = &xd[n * in_sample..(n + 1) * in_sample];
            let gs = &gd[n * out_sample..(n + 1) * out_sample];
            let mut gx = vec![0.0; in_sample];
            let mut gw = vec![0.0; wlen];
            for o in 0..d.o {
                let grp = o / og;
                let go = &gs[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
                for ci in 0..d.cg {
                    let c = grp * d.cg + ci;
                    let xc = &xs[c * d.h * d.w..(c + 1) * d.h * d.w];
                    let gxc = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
                    if pointwise {
                        let widx = o * d.cg + ci;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        for ((&gv, &xv), gx) in go.iter().zip(xc).zip(gxc.iter_mut()) {
                            acc += gv * xv;
                            *gx += gv * wv;
                        }
                        gw[widx] += acc;
                        continue;
                    }
                    for ky in 0..d.kh {
                        let (y0, y1) = valid_range(d.h, d.oh, ky, g.stride, g.pad);
                        for kx in 0..d.kw {
                            let widx = ((o * d.cg + ci) * d.kh + ky) * d.kw + kx;
                            let wv = wd[widx];
                            let (x0, x1) = valid_range(d.w, d.ow, kx, g.stride, g.pad);
                            if x0 >= x1 {
                                continue;
                            }
                            let ix0 = x0 * g.stride + kx - g.pad;
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &go[oy * d.ow + x0..oy * d.ow + x1];
                                let lo = iy * d.w + ix0;
                                let hi = (iy + 1) * d.w;
                                if g.stride == 1 {
                                    let xs = &xc[lo..hi];
                                    let gxs = &mut gxc[lo..hi];
                                    for ((&gv, &xv), gx) in grow.iter().zip(xs).zip(gxs.iter_mut()) {
                                        acc += gv * xv;
                                        *gx += gv * wv;
                                    }
                                } else {
                                    let xs = xc[lo..hi].iter().step_by(g.stride);
                                    let gxs = gxc[lo..hi].iter_mut().step_by(g.stride);
                                    for ((&gv, &xv), gx) in grow.iter().zip(xs).zip(gxs) {
                                        acc += gv * xv;
                                        *gx += gv * wv;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();

    let mut gx = Vec::with_capacity(d.n * in_sample);
    let mut gw = vec![0.0; wlen];
    // fixed-order reduction keeps results independent of thread count
    for (sx, sw) in per_sample {
        gx.extend_from_slice(&sx);
        for (a, b) in gw.iter_mut().zip(&sw) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
    ))
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("transpose needs rank 2, got {s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Per-channel sums over every axis except axis 1 (`[N, C, ...]`).
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::Invalid(format!(
            "expected [N, C] or [N, C, H, W], got {shape:?}"
        ))),
    }
}

/// Per-channel (mean, biased variance) over `[N, C, ...]`.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = channel_layout(x.shape())?;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let d = x.data();
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += d[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += d[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok((mean, var))
}
