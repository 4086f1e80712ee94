//! Manifests, fold splitting, supervised augmentation and the synthetic
//! canopy generator.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Nitrogen treatment class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Control,
    Low,
    Medium,
    High,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Control, Label::Low, Label::Medium, Label::High];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Input(format!("class index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Control => "Control",
            Label::Low => "Low",
            Label::Medium => "Medium",
            Label::High => "High",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Input(format!("unknown label {s:?}; expected Control, Low, Medium or High")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub path: PathBuf,
    pub label: Label,
    pub fold: Option<usize>,
}

/// Labeled images with optional fold assignments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

pub const MANIFEST_HEADER: &str = "path,label,fold";

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "fold"] {
            return Err(Error::Input(format!("manifest header must be `{MANIFEST_HEADER}`")));
        }
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let fold = match &row[2] {
                "" => None,
                f => Some(
                    f.parse()
                        .map_err(|_| Error::Input(format!("manifest row {}: bad fold {f:?}", line + 2)))?,
                ),
            };
            records.push(Record {
                path: PathBuf::from(&row[0]),
                label: row[1].parse()?,
                fold,
            });
        }
        Ok(Self { records })
    }

    /// Reads a manifest; relative image paths are resolved against `base`, or
    /// the manifest's directory when `base` is `None`.
    pub fn load(path: &Path, base: Option<&Path>) -> Result<Self> {
        let mut m = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = base
            .map(Path::to_path_buf)
            .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
        for r in &mut m.records {
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
        }
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.path.display(), r.label, fold));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Number of folds, requiring every record to carry one.
    pub fn num_folds(&self) -> Result<usize> {
        let mut k = 0;
        for r in &self.records {
            match r.fold {
                Some(f) => k = k.max(f + 1),
                None => return Err(Error::Input(format!("{} has no fold assignment", r.path.display()))),
            }
        }
        Ok(k)
    }

    /// Record indices `(train, test)` with `fold` held out.
    pub fn partition(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.records.len()).partition(|&i| self.records[i].fold != Some(fold))
    }
}

/// Class-stratified assignment into `k` folds.
///
/// Each class is shuffled with a seeded RNG and dealt round-robin, starting
/// where the previous class stopped, so fold sizes differ by at most one both
/// per class and overall.
pub fn kfold_split(manifest: &Manifest, k: usize, seed: u64) -> Result<Manifest> {
    if k < 2 {
        return Err(Error::Input(format!("k-fold split needs k >= 2, got {k}")));
    }
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    for label in Label::ALL {
        let mut members: Vec<usize> = (0..out.records.len()).filter(|&i| out.records[i].label == label).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Input(format!(
                "class {label} has {} samples, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            out.records[i].fold = Some((offset + j) % k);
        }
        offset = (offset + members.len()) % k;
    }
    Ok(out)
}

/// `count` random `size × size` windows; returns the patches and their
/// top-left corners.
pub fn crop_patches<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Tensor<T>>, Vec<(usize, usize)>)> {
    let [h, w, _] = image.shape()[..] else {
        return Err(Error::Input(format!("expected [h,w,c] image, got {:?}", image.shape())));
    };
    if size == 0 || h < size || w < size {
        return Err(Error::Input(format!("image {h}x{w} is smaller than patch size {size}")));
    }
    let corners: Vec<(usize, usize)> = (0..count)
        .map(|_| (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
        .collect();
    let patches = corners
        .iter()
        .map(|&(t, l)| crate::imageops::crop(image, t, l, size, size))
        .collect::<Result<_>>()?;
    Ok((patches, corners))
}

pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

/// `(1 - eps) · target + eps / K`.
pub fn label_smooth(target: &[f64], eps: f64) -> Vec<f64> {
    let k = target.len() as f64;
    target.iter().map(|t| (1.0 - eps) * t + eps / k).collect()
}

/// Mixes sample `i` with sample `partner[i]` using a shared weight `lambda`.
pub fn mixup_with_lambda<T: Scalar>(
    batch: &[Tensor<T>],
    labels: &[Vec<f64>],
    lambda: f64,
    partner: &[usize],
) -> Result<(Vec<Tensor<T>>, Vec<Vec<f64>>)> {
    if batch.len() != labels.len() || batch.len() != partner.len() {
        return Err(Error::Input("mixup: batch, labels and partners differ in length".into()));
    }
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    let mut xs = Vec::with_capacity(batch.len());
    let mut ys = Vec::with_capacity(batch.len());
    for (i, &j) in partner.iter().enumerate() {
        if batch[i].shape() != batch[j].shape() || labels[i].len() != labels[j].len() {
            return Err(Error::Input("mixup: samples differ in shape".into()));
        }
        let data = batch[i].data().iter().zip(batch[j].data()).map(|(&a, &b)| l * a + r * b).collect();
        xs.push(Tensor::new(batch[i].shape().to_vec(), data)?);
        ys.push(
            labels[i]
                .iter()
                .zip(&labels[j])
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        );
    }
    Ok((xs, ys))
}

/// Mixup with `λ ~ Beta(alpha, alpha)`, pairing each sample with its mirror
/// position in the batch. Returns the mixed batch, mixed labels and `λ`.
pub fn mixup<T: Scalar, R: Rng + ?Sized>(
    batch: &[Tensor<T>],
    labels: &[Vec<f64>],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<Tensor<T>>, Vec<Vec<f64>>, f64)> {
    if batch.len() < 2 {
        return Err(Error::Input("mixup needs at least two samples".into()));
    }
    let lambda = if alpha > 0.0 {
        Beta::new(alpha, alpha)
            .map_err(|e| Error::Input(format!("mixup alpha: {e}")))?
            .sample(rng)
    } else {
        1.0
    };
    let partner: Vec<usize> = (0..batch.len()).rev().collect();
    let (xs, ys) = mixup_with_lambda(batch, labels, lambda, &partner)?;
    Ok((xs, ys, lambda))
}

/// Loads a PNG or binary PPM as `[h, w, 3]` with values in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(Error::Input(format!("expected [h,w,3] image, got {:?}", img.shape())));
    };
    let raw = img.data().iter().map(|v| to_u8(v.to_f64().unwrap())).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Input("image buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Binary PPM (P6) bytes.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(Error::Input(format!("expected [h,w,3] image, got {:?}", img.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.data().iter().map(|v| to_u8(v.to_f64().unwrap())));
    Ok(bytes)
}

/// Per-class rendering parameters of the synthetic canopy images.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Mean hue in degrees per class.
    pub hue_means: [f64; 4],
    pub hue_std: f64,
    pub saturation: f64,
    pub saturation_std: f64,
    pub value_means: [f64; 4],
    pub value_std: f64,
    /// Dominant texture frequency in cycles per image width.
    pub texture_freq: [f64; 4],
    pub texture_amplitude: f64,
    /// Expected stem strokes per 16×16 pixel area.
    pub stem_density: [f64; 4],
    pub noise: f64,
    /// Folds written to the manifest (skipped when a class has fewer samples).
    pub folds: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            samples_per_class: 32,
            seed: 0,
            hue_means: [50.0, 70.0, 90.0, 110.0],
            hue_std: 4.0,
            saturation: 0.6,
            saturation_std: 0.03,
            value_means: [0.50, 0.56, 0.62, 0.68],
            value_std: 0.01,
            texture_freq: [3.0, 4.0, 5.0, 6.0],
            texture_amplitude: 0.12,
            stem_density: [0.9, 0.7, 0.5, 0.3],
            noise: 0.02,
            folds: 5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("synthetic image_size {} is below 8", self.image_size));
        }
        let mut hues = self.hue_means;
        hues.sort_by(f64::total_cmp);
        if hues.windows(2).any(|w| w[1] - w[0] < 2.0 * self.hue_std) {
            return bad(format!(
                "class hue means {:?} are closer than twice the hue std {}",
                self.hue_means, self.hue_std
            ));
        }
        let values = [self.saturation, self.hue_std, self.noise, self.value_std, self.saturation_std];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("spread parameters must be finite and non-negative".into());
        }
        if self.value_means.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("value means must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// HSV (hue in degrees) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one image of class `label`.
pub fn synth_image<R: Rng + ?Sized>(spec: &SynthSpec, label: Label, rng: &mut R) -> Result<Tensor<f32>> {
    let c = label.index();
    let n = spec.image_size;
    let normal = |mean: f64, std: f64| Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()));
    let hue = normal(spec.hue_means[c], spec.hue_std)?.sample(rng);
    let sat = normal(spec.saturation, spec.saturation_std)?.sample(rng).clamp(0.0, 1.0);
    let val = normal(spec.value_means[c], spec.value_std)?.sample(rng);

    // band-limited texture: a few plane waves near the class frequency
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = spec.texture_freq[c] * rng.gen_range(0.8..1.2) / n as f64;
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (f * theta.cos(), f * theta.sin(), phase)
        })
        .collect();
    let mut texture = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (std::f64::consts::TAU * (fx * j as f64 + fy * i as f64) + ph).sin())
                .sum();
            texture[i * n + j] = t / waves.len() as f64;
        }
    }

    // stems: short bright strokes
    let mut stem = vec![false; n * n];
    let expected = spec.stem_density[c] * (n * n) as f64 / 256.0;
    let strokes = expected.floor() as usize + usize::from(rng.gen::<f64>() < expected.fract());
    for _ in 0..strokes {
        let (y0, x0) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let len = rng.gen_range(n as f64 / 8.0..n as f64 / 3.0);
        let steps = (len * 2.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / 2.0;
            let (y, x) = (y0 + t * angle.sin(), x0 + t * angle.cos());
            if (0.0..n as f64).contains(&y) && (0.0..n as f64).contains(&x) {
                stem[y as usize * n + x as usize] = true;
            }
        }
    }

    let noise = normal(0.0, spec.noise.max(1e-12))?;
    let mut data = Vec::with_capacity(n * n * 3);
    for p in 0..n * n {
        let t = texture[p];
        let (h, s, v) = if stem[p] {
            (hue - 10.0, sat * 0.5, val + 0.25)
        } else {
            (hue + 6.0 * t, sat, val + spec.texture_amplitude * t)
        };
        for ch in hsv_to_rgb(h, s.clamp(0.0, 1.0), v.clamp(0.0, 1.0)) {
            data.push((ch + noise.sample(rng)).clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(vec![n, n, 3], data)
}

/// All synthetic images, class-major, with their labels.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<(Tensor<f32>, Label)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(4 * spec.samples_per_class);
    for label in Label::ALL {
        for i in 0..spec.samples_per_class {
            let seed = spec.seed ^ ((label.index() as u64) << 40) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.push((synth_image(spec, label, &mut rng)?, label));
        }
    }
    Ok(out)
}

/// Writes PNGs and `manifest.csv` into `dir`; paths in the manifest are
/// relative to `dir`.
pub fn synth_write(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    let images = synth_generate(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, (img, label)) in images.iter().enumerate() {
        let name = format!("{}_{:05}.png", label.as_str().to_lowercase(), i);
        write_atomic(&dir.join(&name), &encode_png(img)?)?;
        manifest.records.push(Record {
            path: PathBuf::from(name),
            label: *label,
            fold: None,
        });
    }
    if spec.folds >= 2 && spec.samples_per_class >= spec.folds {
        manifest = kfold_split(&manifest, spec.folds, spec.seed)?;
    }
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(per_class: usize) -> Manifest {
        let mut m = Manifest::default();
        for label in Label::ALL {
            for i in 0..per_class {
                m.records.push(Record {
                    path: PathBuf::from(format!("{label}_{i}.png")),
                    label,
                    fold: None,
                });
            }
        }
        m
    }

    #[test]
    fn labels_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()).unwrap(), l);
        }
        assert_eq!("high".parse::<Label>().unwrap(), Label::High);
        assert!("Extreme".parse::<Label>().is_err());
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = kfold_split(&manifest(5), 5, 1).unwrap();
        assert_eq!(Manifest::parse(&m.to_csv()).unwrap(), m);
        assert!(Manifest::parse("file,label\n").is_err());
        assert!(Manifest::parse("path,label,fold\na.png,Huge,0\n").is_err());
    }

    #[test]
    fn hundred_per_class_gives_twenty_per_fold() {
        let m = kfold_split(&manifest(100), 5, 9).unwrap();
        for label in Label::ALL {
            for f in 0..5 {
                let n = m.records.iter().filter(|r| r.label == label && r.fold == Some(f)).count();
                assert_eq!(n, 20);
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(kfold_split(&manifest(4), 5, 0).is_err());
        assert!(kfold_split(&manifest(10), 1, 0).is_err());
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let m = kfold_split(&manifest(7), 5, 3).unwrap();
        for f in 0..5 {
            let (train, test) = m.partition(f);
            assert_eq!(train.len() + test.len(), m.len());
            assert!(test.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn full_size_crop_is_the_image() {
        let img = Tensor::<f32>::from_fn(vec![6, 6, 3], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (patches, corners) = crop_patches(&img, 6, 1, &mut rng).unwrap();
        assert_eq!(patches[0], img);
        assert_eq!(corners, vec![(0, 0)]);
        assert!(crop_patches(&img, 7, 1, &mut rng).is_err());
    }

    #[test]
    fn crop_corners_stay_in_bounds() {
        // corner arithmetic only; the image content is irrelevant
        let img = Tensor::<f32>::zeros(vec![302, 403, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, corners) = crop_patches(&img, 224, 50, &mut rng).unwrap();
        assert!(corners.iter().all(|&(t, l)| t <= 302 - 224 && l <= 403 - 224));
    }

    #[test]
    fn label_smoothing_values() {
        let s = label_smooth(&one_hot(0, 4), 0.1);
        let want = [0.925, 0.025, 0.025, 0.025];
        assert!(s.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(label_smooth(&one_hot(2, 4), 0.0), one_hot(2, 4));
    }

    #[test]
    fn mixup_lambda_endpoints() {
        let batch = vec![Tensor::<f64>::full(vec![2], 1.0), Tensor::full(vec![2], 3.0)];
        let labels = vec![one_hot(0, 4), one_hot(1, 4)];
        let (x, y) = mixup_with_lambda(&batch, &labels, 1.0, &[1, 0]).unwrap();
        assert_eq!(x, batch);
        assert_eq!(y, labels);
        let (x, y) = mixup_with_lambda(&batch, &labels, 0.5, &[1, 0]).unwrap();
        assert_eq!(x[0].data(), &[2.0, 2.0]);
        assert_eq!(y[0], vec![0.5, 0.5, 0.0, 0.0]);
        assert!(mixup(&batch[..1], &labels[..1], 0.2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn hsv_primaries() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]));
        assert!(close(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]));
        assert!(close(hsv_to_rgb(240.0, 1.0, 0.5), [0.0, 0.0, 0.5]));
        assert!(close(hsv_to_rgb(77.0, 0.0, 0.3), [0.3, 0.3, 0.3]));
    }

    #[test]
    fn empty_spec_gives_empty_set() {
        let spec = SynthSpec {
            samples_per_class: 0,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&spec).unwrap().is_empty());
    }

    #[test]
    fn overlapping_hues_rejected() {
        let spec = SynthSpec {
            hue_means: [50.0, 55.0, 90.0, 110.0],
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let spec = SynthSpec {
            image_size: 16,
            samples_per_class: 1,
            ..SynthSpec::default()
        };
        let img = &synth_generate(&spec).unwrap()[0].0;
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("a.png");
        let ppm = dir.path().join("a.ppm");
        std::fs::write(&png, encode_png(img).unwrap()).unwrap();
        std::fs::write(&ppm, encode_ppm(img).unwrap()).unwrap();
        let a = load_image(&png).unwrap();
        let b = load_image(&ppm).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(img).unwrap() <= 0.5 / 255.0 + 1e-6);
    }
}
