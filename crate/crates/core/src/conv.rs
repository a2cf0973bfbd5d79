//! Convolution and the small set of spatial ops the networks need.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample. Falls back to replicate on
    /// axes of length 1.
    #[default]
    Reflect,
    Replicate,
}

/// Map a possibly out-of-range coordinate into `[0, n)`, or `None` for a
/// zero-padded tap.
#[inline]
pub fn pad_index(i: isize, n: usize, mode: Padding) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        Padding::Zero => None,
        Padding::Replicate => Some(i.clamp(0, n_i - 1) as usize),
        Padding::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n_i - 1);
            let mut j = i.rem_euclid(period);
            if j >= n_i {
                j = period - j;
            }
            Some(j as usize)
        }
    }
}

fn conv_out_dims(x: Dims, w: Dims, stride: usize, pad: usize) -> Result<Dims> {
    if stride == 0 {
        return Err(Error::contract("stride must be >= 1"));
    }
    if x.channels != w.channels {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            x.channels, w.channels
        )));
    }
    let (ph, pw) = (x.height + 2 * pad, x.width + 2 * pad);
    if ph < w.height || pw < w.width {
        return Err(Error::shape(format!(
            "kernel {}x{} larger than padded input {ph}x{pw}",
            w.height, w.width
        )));
    }
    Ok(Dims::new(
        x.batch,
        w.batch,
        (ph - w.height) / stride + 1,
        (pw - w.width) / stride + 1,
    ))
}

fn check_bias<T>(bias: Option<&[T]>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c_out => Err(Error::shape(format!(
            "bias has {} entries for {c_out} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Materialise the padded input, shape (B, C, H + 2p, W + 2p).
pub fn pad2d<T: Scalar>(x: &Tensor<T>, pad: usize, mode: Padding) -> Tensor<T> {
    let d = x.dims();
    let (ph, pw) = (d.height + 2 * pad, d.width + 2 * pad);
    let mut out = Tensor::zeros(Dims::new(d.batch, d.channels, ph, pw));
    let p = pad as isize;
    let cols: Vec<Option<usize>> = (0..pw)
        .map(|x| pad_index(x as isize - p, d.width, mode))
        .collect();
    for b in 0..d.batch {
        for c in 0..d.channels {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for y in 0..ph {
                let Some(sy) = pad_index(y as isize - p, d.height, mode) else {
                    continue;
                };
                let srow = &src[sy * d.width..(sy + 1) * d.width];
                for (dx, col) in dst[y * pw..(y + 1) * pw].iter_mut().zip(&cols) {
                    if let Some(sx) = col {
                        *dx = srow[*sx];
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation. `w` is (C_out, C_in, kh, kw).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    mode: Padding,
) -> Result<Tensor<T>> {
    let wd = w.dims();
    let od = conv_out_dims(x.dims(), wd, stride, pad)?;
    check_bias(bias, wd.batch)?;
    let xp = pad2d(x, pad, mode);
    let pw = xp.dims().width;
    let mut out = Tensor::zeros(od);
    for b in 0..od.batch {
        for co in 0..od.channels {
            let mut acc = vec![bias.map_or(T::zero(), |bs| bs[co]); od.plane()];
            for ci in 0..wd.channels {
                let src = xp.plane(b, ci);
                for ky in 0..wd.height {
                    for kx in 0..wd.width {
                        let wv = w.at(co, ci, ky, kx);
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..od.height {
                            let row = &src[(oy * stride + ky) * pw..];
                            let dst = &mut acc[oy * od.width..(oy + 1) * od.width];
                            if stride == 1 {
                                for (d, &s) in dst.iter_mut().zip(&row[kx..kx + od.width]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[ox * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
            out.plane_mut(b, co).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Straightforward reference convolution: one loop per output element and
/// per kernel tap, resolving padding per tap.
pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    mode: Padding,
) -> Result<Tensor<T>> {
    let xd = x.dims();
    let wd = w.dims();
    let od = conv_out_dims(xd, wd, stride, pad)?;
    check_bias(bias, wd.batch)?;
    let mut out = Tensor::zeros(od);
    for b in 0..od.batch {
        for co in 0..od.channels {
            for oy in 0..od.height {
                for ox in 0..od.width {
                    let mut s = bias.map_or(T::zero(), |bs| bs[co]);
                    for ci in 0..wd.channels {
                        for ky in 0..wd.height {
                            for kx in 0..wd.width {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if let (Some(y), Some(xx)) = (
                                    pad_index(iy, xd.height, mode),
                                    pad_index(ix, xd.width, mode),
                                ) {
                                    s += w.at(co, ci, ky, kx) * x.at(b, ci, y, xx);
                                }
                            }
                        }
                    }
                    out.set(b, co, oy, ox, s);
                }
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Non-overlapping `k x k` mean pooling; spatial dims must be multiples of `k`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if k == 0 || !d.height.is_multiple_of(k) || !d.width.is_multiple_of(k) {
        return Err(Error::shape(format!(
            "{}x{} is not divisible by pool size {k}",
            d.height, d.width
        )));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let od = Dims::new(d.batch, d.channels, d.height / k, d.width / k);
    let norm = T::of((k * k) as f64);
    let mut out = Tensor::zeros(od);
    for b in 0..d.batch {
        for c in 0..d.channels {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for oy in 0..od.height {
                for ox in 0..od.width {
                    let mut s = T::zero();
                    for y in oy * k..(oy + 1) * k {
                        for v in &src[y * d.width + ox * k..y * d.width + (ox + 1) * k] {
                            s += *v;
                        }
                    }
                    dst[oy * od.width + ox] = s / norm;
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel spatial mean of a batch-1 tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let d = x.dims();
    let n = T::of(d.plane() as f64);
    (0..d.channels)
        .map(|c| x.plane(0, c).iter().copied().sum::<T>() / n)
        .collect()
}

/// Group normalization with per-channel affine parameters.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.dims();
    if groups == 0 || !d.channels.is_multiple_of(groups) {
        return Err(Error::shape(format!(
            "{} channels cannot form {groups} groups",
            d.channels
        )));
    }
    if gamma.len() != d.channels || beta.len() != d.channels {
        return Err(Error::shape("group norm affine length != channels"));
    }
    let per = d.channels / groups;
    let mut out = x.clone();
    for b in 0..d.batch {
        for g in 0..groups {
            let chans = g * per..(g + 1) * per;
            let count = T::of((per * d.plane()) as f64);
            let mean = chans
                .clone()
                .map(|c| x.plane(b, c).iter().copied().sum::<T>())
                .sum::<T>()
                / count;
            let var = chans
                .clone()
                .map(|c| {
                    x.plane(b, c)
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                })
                .sum::<T>()
                / count;
            let inv = T::one() / (var + eps).sqrt();
            for c in chans {
                let (ga, be) = (gamma[c], beta[c]);
                for v in out.plane_mut(b, c) {
                    *v = (*v - mean) * inv * ga + be;
                }
            }
        }
    }
    Ok(out)
}

/// Rearrange (B, C*s*s, H, W) into (B, C, H*s, W*s).
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if s == 0 || !d.channels.is_multiple_of(s * s) {
        return Err(Error::shape(format!(
            "{} channels not divisible by {s}^2",
            d.channels
        )));
    }
    let oc = d.channels / (s * s);
    let od = Dims::new(d.batch, oc, d.height * s, d.width * s);
    let mut out = Tensor::zeros(od);
    for b in 0..d.batch {
        for c in 0..oc {
            for i in 0..s {
                for j in 0..s {
                    let src = x.plane(b, c * s * s + i * s + j);
                    let dst = out.plane_mut(b, c);
                    for y in 0..d.height {
                        for xx in 0..d.width {
                            dst[(y * s + i) * od.width + xx * s + j] = src[y * d.width + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Bicubic upsampling by an integer factor (half-pixel centers, a = -0.75,
/// edge samples replicated).
pub fn upsample_bicubic<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::contract("scale must be >= 1"));
    }
    let d = x.dims();
    if s == 1 {
        return Ok(x.clone());
    }
    let od = Dims::new(d.batch, d.channels, d.height * s, d.width * s);
    let taps = |n_out: usize, n_in: usize| -> Vec<([usize; 4], [f64; 4])> {
        (0..n_out)
            .map(|o| {
                let src = (o as f64 + 0.5) / s as f64 - 0.5;
                let base = src.floor();
                let w = cubic_weights(src - base);
                let idx = [-1isize, 0, 1, 2].map(|k| {
                    (base as isize + k).clamp(0, n_in as isize - 1) as usize
                });
                (idx, w)
            })
            .collect()
    };
    let rows = taps(od.height, d.height);
    let cols = taps(od.width, d.width);
    let mut out = Tensor::zeros(od);
    let mut tmp = vec![0.0f64; od.height * d.width];
    for b in 0..d.batch {
        for c in 0..d.channels {
            let src = x.plane(b, c);
            for (oy, (ri, rw)) in rows.iter().enumerate() {
                for xx in 0..d.width {
                    tmp[oy * d.width + xx] = (0..4)
                        .map(|k| rw[k] * src[ri[k] * d.width + xx].as_f64())
                        .sum();
                }
            }
            let dst = out.plane_mut(b, c);
            for oy in 0..od.height {
                for (ox, (ci, cw)) in cols.iter().enumerate() {
                    let v: f64 = (0..4).map(|k| cw[k] * tmp[oy * d.width + ci[k]]).sum();
                    dst[oy * od.width + ox] = T::of(v);
                }
            }
        }
    }
    Ok(out)
}
