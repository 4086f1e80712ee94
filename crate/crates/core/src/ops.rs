//! Forward kernels and the adjoint helpers the tape uses for backward.
//!
//! Everything here is a pure function of its inputs. The tape in
//! [`crate::tape`] wraps these to record a differentiable graph; the scaling
//! harness calls them directly to time inference without a tape.

use crate::error::{dim_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, false, b, false)
}

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
pub fn matmul_ex<T: Scalar>(
    a: &Tensor<T>,
    a_trans: bool,
    b: &Tensor<T>,
    b_trans: bool,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if a_trans { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
    if k != k2 {
        return dim_err(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        );
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), a_trans, b.data(), b_trans, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Adds a length-`c` vector to every row of an `[r×c]` matrix.
pub fn add_row<T: Scalar>(a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if row.numel() != c {
        return dim_err("add_row", format!("{:?} + row {:?}", a.shape(), row.shape()));
    }
    let mut out = a.data().to_vec();
    for i in 0..r {
        for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    Tensor::new(vec![r, c], out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(vec![r, c], out)
}

pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Per-row (layer norm) or per-column (batch norm) normalization statistics.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn check_affine<T: Scalar>(op: &'static str, d: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != d || beta.numel() != d {
        return dim_err(
            op,
            format!("affine params {:?}/{:?} for width {d}", gamma.shape(), beta.shape()),
        );
    }
    Ok(())
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_fwd(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, d) = x.dims2()?;
    if d == 0 {
        return dim_err("layer_norm", "zero-width rows");
    }
    check_affine("layer_norm", d, gamma, beta)?;
    let eps = T::lit(eps);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); n * d];
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        for (j, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = (row[j] - mu) * rs * g[j] + b[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(vec![n, d], out)?, NormStats { mean, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = x.dims2().expect("validated in forward");
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let g = gamma.data();
    let mut dx = vec![T::zero(); n * d];
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut gx = vec![T::zero(); d];
    for i in 0..n {
        let (mu, rs) = (stats.mean[i], stats.rstd[i]);
        let row = x.row(i);
        let dyr = dy.row(i);
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mu) * rs;
            gx[j] = dyr[j] * g[j];
            mean_g += gx[j];
            mean_gx += gx[j] * xhat[j];
            dg[j] += dyr[j] * xhat[j];
            db[j] += dyr[j];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        for j in 0..d {
            dx[i * d + j] = rs * (gx[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    (
        Tensor::new(vec![n, d], dx).unwrap(),
        Tensor::new(gamma.shape().to_vec(), dg).unwrap(),
        Tensor::new(gamma.shape().to_vec(), db).unwrap(),
    )
}

/// Per-column mean and biased variance of an `[n×c]` matrix.
pub fn column_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c) = x.dims2()?;
    if n == 0 {
        return dim_err("batch_norm", "empty batch");
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut mean = vec![T::zero(); c];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    Ok((mean, var))
}

/// Batch normalization of an `[n×c]` matrix over its rows with the supplied
/// per-channel mean and variance.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(batch_norm_fwd(x, gamma, beta, mean, var, eps)?.0)
}

pub(crate) fn batch_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, c) = x.dims2()?;
    check_affine("batch_norm", c, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return dim_err("batch_norm", "statistics width differs from channel count");
    }
    let eps = T::lit(eps);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let row = x.row(i);
        for j in 0..c {
            out[i * c + j] = (row[j] - mean[j]) * rstd[j] * g[j] + b[j];
        }
    }
    Ok((
        Tensor::new(vec![n, c], out)?,
        NormStats {
            mean: mean.to_vec(),
            rstd,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// treated as functions of `x`; otherwise they are constants.
pub(crate) fn batch_norm_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = x.dims2().expect("validated in forward");
    let g = gamma.data();
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let mut mean_gx = vec![T::zero(); c];
    for i in 0..n {
        let row = x.row(i);
        let dyr = dy.row(i);
        for j in 0..c {
            let xhat = (row[j] - stats.mean[j]) * stats.rstd[j];
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            mean_gx[j] += dyr[j] * g[j] * xhat;
        }
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); n * c];
    for i in 0..n {
        let row = x.row(i);
        let dyr = dy.row(i);
        for j in 0..c {
            let gxj = dyr[j] * g[j];
            dx[i * c + j] = if batch_stats {
                let xhat = (row[j] - stats.mean[j]) * stats.rstd[j];
                stats.rstd[j] * (gxj - db[j] * g[j] * inv_n - xhat * mean_gx[j] * inv_n)
            } else {
                stats.rstd[j] * gxj
            };
        }
    }
    (
        Tensor::new(vec![n, c], dx).unwrap(),
        Tensor::new(gamma.shape().to_vec(), dg).unwrap(),
        Tensor::new(gamma.shape().to_vec(), db).unwrap(),
    )
}

/// `(batch, h, w, c)` for a rank-3 `[h,w,c]` or rank-4 `[b,h,w,c]` tensor.
fn image_dims<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => dim_err(op, format!("expected [h,w,c] or [b,h,w,c], got {:?}", x.shape())),
    }
}

/// 3×3 depthwise convolution, stride 1, zero padding 1 (cross-correlation).
///
/// `x` is `[h,w,c]` or `[b,h,w,c]`; `kernel` is `[3,3,c]`.
pub fn depthwise_conv3x3<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = image_dims("depthwise_conv3x3", x)?;
    if kernel.shape() != [3, 3, c] {
        return dim_err(
            "depthwise_conv3x3",
            format!("kernel {:?} for {c} channels", kernel.shape()),
        );
    }
    let xs = x.data();
    let ks = kernel.data();
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        let base = bi * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let o = base + (i * w + j) * c;
                for ki in 0..3 {
                    let si = i as isize + ki as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let sj = j as isize + kj as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let s = base + (si as usize * w + sj as usize) * c;
                        let k = (ki * 3 + kj) * c;
                        let (dst, src, tap) = (&mut out[o..o + c], &xs[s..s + c], &ks[k..k + c]);
                        for ((d, &v), &t) in dst.iter_mut().zip(src).zip(tap) {
                            *d += v * t;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dkernel)`.
pub(crate) fn depthwise_conv3x3_bwd<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, h, w, c) = image_dims("depthwise_conv3x3", x).expect("validated in forward");
    let xs = x.data();
    let ks = kernel.data();
    let gs = dy.data();
    let mut dx = vec![T::zero(); xs.len()];
    let mut dk = vec![T::zero(); ks.len()];
    for bi in 0..b {
        let base = bi * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let o = base + (i * w + j) * c;
                for ki in 0..3 {
                    let si = i as isize + ki as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let sj = j as isize + kj as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let s = base + (si as usize * w + sj as usize) * c;
                        let k = (ki * 3 + kj) * c;
                        for ch in 0..c {
                            let g = gs[o + ch];
                            dx[s + ch] += g * ks[k + ch];
                            dk[k + ch] += g * xs[s + ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(kernel.shape().to_vec(), dk).unwrap(),
    )
}

/// Scales every column of an `[n×d]` matrix to unit L2 norm; columns with norm
/// below `eps` are divided by `eps` instead.
pub fn l2_normalize_cols<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(l2_normalize_fwd(x, eps, false)?.0)
}

pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(l2_normalize_fwd(x, eps, true)?.0)
}

/// Returns the normalized tensor and the clamped norms (one per column or row).
pub(crate) fn l2_normalize_fwd<T: Scalar>(
    x: &Tensor<T>,
    eps: f64,
    rows: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, d) = x.dims2()?;
    let eps = T::lit(eps);
    let xs = x.data();
    let groups = if rows { n } else { d };
    let mut sq = vec![T::zero(); groups];
    for i in 0..n {
        for j in 0..d {
            let v = xs[i * d + j];
            sq[if rows { i } else { j }] += v * v;
        }
    }
    let norms: Vec<T> = sq.into_iter().map(|s| s.sqrt().max(eps)).collect();
    let mut out = xs.to_vec();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] /= norms[if rows { i } else { j }];
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, norms))
}

pub(crate) fn l2_normalize_bwd<T: Scalar>(
    y: &Tensor<T>,
    norms: &[T],
    eps: f64,
    dy: &Tensor<T>,
    rows: bool,
) -> Tensor<T> {
    let (n, d) = y.dims2().expect("validated in forward");
    let eps = T::lit(eps);
    let (ys, gs) = (y.data(), dy.data());
    let mut dot = vec![T::zero(); norms.len()];
    for i in 0..n {
        for j in 0..d {
            dot[if rows { i } else { j }] += ys[i * d + j] * gs[i * d + j];
        }
    }
    let mut dx = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..d {
            let g = if rows { i } else { j };
            let k = i * d + j;
            dx[k] = if norms[g] > eps {
                (gs[k] - ys[k] * dot[g]) / norms[g]
            } else {
                gs[k] / eps
            };
        }
    }
    Tensor::new(vec![n, d], dx).unwrap()
}
