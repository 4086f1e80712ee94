//! Photometric augmentation and multi-crop view generation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imageops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Role of a view; blur and solarization probabilities depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Global1,
    Global2,
    Local,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: (f64, f64),
    pub blur_prob_global1: f64,
    pub blur_prob_global2: f64,
    pub blur_prob_local: f64,
    /// Applied to [`ViewKind::Global2`] only.
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            blur_sigma: (0.1, 2.0),
            blur_prob_global1: 1.0,
            blur_prob_global2: 0.1,
            blur_prob_local: 0.5,
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every random transform disabled.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob_global1: 0.0,
            blur_prob_global2: 0.0,
            blur_prob_local: 0.0,
            solarize_prob: 0.0,
            ..Self::default()
        }
    }

    fn blur_prob(&self, kind: ViewKind) -> f64 {
        match kind {
            ViewKind::Global1 => self.blur_prob_global1,
            ViewKind::Global2 => self.blur_prob_global2,
            ViewKind::Local => self.blur_prob_local,
        }
    }
}

/// Which transforms were applied to a view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentRecord {
    pub flipped: bool,
    /// Brightness, contrast and saturation factors.
    pub jitter: Option<(f64, f64, f64)>,
    pub blur_sigma: Option<f64>,
    pub solarized: bool,
}

fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn rgb<T: Scalar>(img: &Tensor<T>) -> Result<()> {
    match img.shape() {
        [_, _, 3] => Ok(()),
        s => Err(Error::Input(format!("expected an RGB [h,w,3] image, got {s:?}"))),
    }
}

fn luma<T: Scalar>(px: &[T]) -> T {
    T::lit(0.299) * px[0] + T::lit(0.587) * px[1] + T::lit(0.114) * px[2]
}

/// Brightness, contrast and saturation scaling, in that order, each clamped.
pub fn color_jitter<T: Scalar>(img: &Tensor<T>, brightness: f64, contrast: f64, saturation: f64) -> Result<Tensor<T>> {
    rgb(img)?;
    let mut out = img.map(|v| clamp01(v * T::lit(brightness)));
    let n = (out.numel() / 3) as f64;
    let mean = out.data().chunks_exact(3).map(luma).fold(T::zero(), |a, b| a + b) / T::lit(n);
    let c = T::lit(contrast);
    out.data_mut().iter_mut().for_each(|v| *v = clamp01((*v - mean) * c + mean));
    let s = T::lit(saturation);
    for px in out.data_mut().chunks_exact_mut(3) {
        let g = luma(px);
        px.iter_mut().for_each(|v| *v = clamp01((*v - g) * s + g));
    }
    Ok(out)
}

/// `1 - x` for values at or above `threshold`.
pub fn solarize<T: Scalar>(img: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::lit(threshold);
    img.map(|v| if v >= t { T::one() - v } else { v })
}

/// Random flip, color jitter, blur and solarization for one view.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    img: &Tensor<T>,
    kind: ViewKind,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, AugmentRecord)> {
    rgb(img)?;
    let mut rec = AugmentRecord::default();
    let mut out = img.clone();
    // Every draw happens unconditionally so the stream position does not
    // depend on which transforms fire.
    let flip_u: f64 = rng.gen();
    let jitter_u: f64 = rng.gen();
    let factors: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let blur_u: f64 = rng.gen();
    let sigma_u: f64 = rng.gen();
    let solarize_u: f64 = rng.gen();

    if flip_u < cfg.flip_prob {
        out = imageops::hflip(&out)?;
        rec.flipped = true;
    }
    if jitter_u < cfg.jitter_prob {
        let f = |u: f64, s: f64| 1.0 - s + 2.0 * s * u;
        let (b, c, s) = (
            f(factors[0], cfg.brightness),
            f(factors[1], cfg.contrast),
            f(factors[2], cfg.saturation),
        );
        out = color_jitter(&out, b, c, s)?;
        rec.jitter = Some((b, c, s));
    }
    if blur_u < cfg.blur_prob(kind) {
        let (lo, hi) = cfg.blur_sigma;
        let sigma = lo + (hi - lo) * sigma_u;
        out = imageops::gaussian_blur(&out, sigma)?;
        rec.blur_sigma = Some(sigma);
    }
    if kind == ViewKind::Global2 && solarize_u < cfg.solarize_prob {
        out = solarize(&out, cfg.solarize_threshold);
        rec.solarized = true;
    }
    Ok((out.map(clamp01), rec))
}

/// Pixel rectangle inside a source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn area_fraction(&self, src_h: usize, src_w: usize) -> f64 {
        (self.height * self.width) as f64 / (src_h * src_w) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCropConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub num_local: usize,
    /// Source-area fraction range of global crops, inclusive.
    pub global_scale: (f64, f64),
    /// Source-area fraction range of local crops; the upper bound is strict.
    pub local_scale: (f64, f64),
    pub augment: AugmentConfig,
}

impl MultiCropConfig {
    pub fn paper() -> Self {
        Self {
            global_size: 224,
            local_size: 96,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            num_local: 6,
            global_scale: (0.5, 1.0),
            local_scale: (0.05, 0.5),
            augment: AugmentConfig::default(),
        }
    }
}

const LOG_RATIO: (f64, f64) = (-0.287_682_072_451_780_9, 0.287_682_072_451_780_9); // ln(3/4), ln(4/3)
const CROP_ATTEMPTS: usize = 10;

fn scale_range(kind: ViewKind, cfg: &MultiCropConfig) -> ((f64, f64), bool) {
    match kind {
        ViewKind::Local => (cfg.local_scale, false),
        _ => (cfg.global_scale, true),
    }
}

fn rect_ok(rect: &CropRect, src_h: usize, src_w: usize, scale: (f64, f64), upper_inclusive: bool) -> bool {
    if rect.height == 0 || rect.width == 0 || rect.top + rect.height > src_h || rect.left + rect.width > src_w {
        return false;
    }
    let frac = rect.area_fraction(src_h, src_w);
    frac >= scale.0 && (frac < scale.1 || (upper_inclusive && frac == scale.1))
}

/// Whether `rect` lies inside the source and satisfies the area constraint
/// for `kind`.
pub fn crop_acceptable(rect: &CropRect, src_h: usize, src_w: usize, kind: ViewKind, cfg: &MultiCropConfig) -> bool {
    let (scale, inclusive) = scale_range(kind, cfg);
    rect_ok(rect, src_h, src_w, scale, inclusive)
}

/// Random-resized-crop rectangle: area fraction uniform in `scale`, aspect
/// ratio log-uniform in [3/4, 4/3]. Rectangles violating the constraints are
/// redrawn; after repeated failures a centered rectangle of valid area is
/// returned.
pub fn sample_rect<R: Rng + ?Sized>(
    src_h: usize,
    src_w: usize,
    scale: (f64, f64),
    upper_inclusive: bool,
    rng: &mut R,
) -> CropRect {
    let area = (src_h * src_w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let frac = rng.gen_range(scale.0..scale.1);
        let ratio = rng.gen_range(LOG_RATIO.0..LOG_RATIO.1).exp();
        let width = (frac * area * ratio).sqrt().round() as usize;
        let height = (frac * area / ratio).sqrt().round() as usize;
        if width == 0 || height == 0 || width > src_w || height > src_h {
            continue;
        }
        let rect = CropRect {
            top: rng.gen_range(0..=src_h - height),
            left: rng.gen_range(0..=src_w - width),
            height,
            width,
        };
        if rect_ok(&rect, src_h, src_w, scale, upper_inclusive) {
            return rect;
        }
    }
    fallback_rect(src_h, src_w, scale, upper_inclusive)
}

pub fn sample_crop<R: Rng + ?Sized>(
    src_h: usize,
    src_w: usize,
    kind: ViewKind,
    cfg: &MultiCropConfig,
    rng: &mut R,
) -> CropRect {
    let (scale, inclusive) = scale_range(kind, cfg);
    sample_rect(src_h, src_w, scale, inclusive, rng)
}

fn fallback_rect(src_h: usize, src_w: usize, scale: (f64, f64), upper_inclusive: bool) -> CropRect {
    let (height, width) = if upper_inclusive && scale.1 >= 1.0 {
        (src_h, src_w)
    } else {
        let target = 0.5 * (scale.0 + scale.1);
        let side = ((target * (src_h * src_w) as f64).sqrt().floor() as usize).clamp(1, src_h.min(src_w));
        (side, side)
    };
    CropRect {
        top: (src_h - height) / 2,
        left: (src_w - width) / 2,
        height,
        width,
    }
}

/// The views of one source image.
#[derive(Clone, Debug)]
pub struct CropSet<T> {
    pub globals: Vec<Tensor<T>>,
    pub locals: Vec<Tensor<T>>,
    /// Crop rectangles, globals first.
    pub rects: Vec<CropRect>,
    pub records: Vec<AugmentRecord>,
}

fn make_view<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    kind: ViewKind,
    size: usize,
    cfg: &MultiCropConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, CropRect, AugmentRecord)> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let rect = sample_crop(h, w, kind, cfg, rng);
    let view = imageops::crop(image, rect.top, rect.left, rect.height, rect.width)?;
    let view = imageops::resize_bilinear(&view, size, size)?;
    let (view, rec) = augment(&view, kind, &cfg.augment, rng)?;
    Ok((view, rect, rec))
}

/// Two augmented global views and `cfg.num_local` local views.
pub fn multi_crop<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, cfg: &MultiCropConfig, rng: &mut R) -> Result<CropSet<T>> {
    rgb(image)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h < cfg.global_size || w < cfg.global_size {
        return Err(Error::Input(format!(
            "source {h}x{w} is smaller than the {g}x{g} global view",
            g = cfg.global_size
        )));
    }
    let mut set = CropSet {
        globals: Vec::with_capacity(2),
        locals: Vec::with_capacity(cfg.num_local),
        rects: Vec::with_capacity(2 + cfg.num_local),
        records: Vec::with_capacity(2 + cfg.num_local),
    };
    for kind in [ViewKind::Global1, ViewKind::Global2] {
        let (v, r, a) = make_view(image, kind, cfg.global_size, cfg, rng)?;
        set.globals.push(v);
        set.rects.push(r);
        set.records.push(a);
    }
    for _ in 0..cfg.num_local {
        let (v, r, a) = make_view(image, ViewKind::Local, cfg.local_size, cfg, rng)?;
        set.locals.push(v);
        set.rects.push(r);
        set.records.push(a);
    }
    Ok(set)
}
