//! Forward-only image kernels over `[h, w, c]` tensors.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn hwc<T: Scalar>(op: &'static str, img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match img.shape()[..] {
        [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
        _ => dim_err(op, format!("expected non-empty [h,w,c], got {:?}", img.shape())),
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur<T: Scalar>(img: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("gaussian_blur", img)?;
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let taps: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    let r = (taps.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![T::zero(); src.len()];
    for i in 0..h {
        for j in 0..w {
            for (t, &wt) in taps.iter().enumerate() {
                let sj = (j as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                for ch in 0..c {
                    tmp[(i * w + j) * c + ch] += wt * src[(i * w + sj) * c + ch];
                }
            }
        }
    }
    let mut out = vec![T::zero(); src.len()];
    for i in 0..h {
        for (t, &wt) in taps.iter().enumerate() {
            let si = (i as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
            for j in 0..w {
                for ch in 0..c {
                    out[(i * w + j) * c + ch] += wt * tmp[(si * w + j) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("resize_bilinear", img)?;
    if out_h == 0 || out_w == 0 {
        return dim_err("resize_bilinear", "empty output size");
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, T) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, T::lit(s - lo as f64))
    };
    let cols: Vec<_> = (0..out_w).map(|j| coord(j, out_w, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, out_h, h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// The `height × width` window whose top-left corner is `(top, left)`.
pub fn crop<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("crop", img)?;
    if top + height > h || left + width > w {
        return dim_err(
            "crop",
            format!("window {height}x{width} at ({top},{left}) exceeds {h}x{w}"),
        );
    }
    let src = img.data();
    let mut out = Vec::with_capacity(height * width * c);
    for i in top..top + height {
        out.extend_from_slice(&src[(i * w + left) * c..(i * w + left + width) * c]);
    }
    Tensor::new(vec![height, width, c], out)
}

pub fn hflip<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("hflip", img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..h {
        for j in (0..w).rev() {
            out.extend_from_slice(&src[(i * w + j) * c..(i * w + j + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}
