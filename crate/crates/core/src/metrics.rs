//! Confusion matrices, classification metrics, cross-validation summaries and
//! saliency maps.

use std::fmt::Write as _;

use crate::data::{Label, Manifest};
use crate::error::{Error, Result};
use crate::imageops;
use crate::model::{CsvtModel, Mode};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `K × K` counts, rows actual and columns predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Input(format!(
                "{} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&a, &p) in labels.iter().zip(preds) {
            cm.add(a, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, actual: usize, predicted: usize) -> Result<()> {
        if actual >= self.k || predicted >= self.k {
            return Err(Error::Input(format!(
                "class id ({actual}, {predicted}) outside 0..{}",
                self.k
            )));
        }
        self.counts[actual * self.k + predicted] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        (0..self.k).map(|p| self.get(actual, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|a| self.get(a, predicted)).sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        self.col_sum(c) - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.row_sum(c) - self.tp(c)
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any of the three had a zero denominator and was reported as 0.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    /// `trace / total`.
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if cm.k() == 0 || total == 0 {
        return Err(Error::Input("metrics of an empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.k())
        .map(|c| {
            let mut flagged = false;
            let tp = cm.tp(c) as f64;
            let precision = ratio(tp, (cm.tp(c) + cm.fp(c)) as f64, &mut flagged);
            let recall = ratio(tp, (cm.tp(c) + cm.fn_(c)) as f64, &mut flagged);
            let f1 = ratio(2.0 * recall * precision, recall + precision, &mut flagged);
            ClassMetrics {
                precision,
                recall,
                f1,
                flagged,
            }
        })
        .collect();
    let trace: u64 = (0..cm.k()).map(|c| cm.tp(c)).sum();
    let k = cm.k() as f64;
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
    })
}

/// Per-fold metrics of a cross-validation run.
#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<(usize, ConfusionMatrix, Metrics)>,
}

pub const METRICS_HEADER: &str = "fold,class,precision,recall,f1,flagged";

impl CvReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.folds.iter().map(|(_, _, m)| m.accuracy).sum::<f64>() / self.folds.len().max(1) as f64
    }

    pub fn mean_macro_f1(&self) -> f64 {
        self.folds.iter().map(|(_, _, m)| m.macro_f1).sum::<f64>() / self.folds.len().max(1) as f64
    }

    /// One row per fold and class, a `macro` row and an `accuracy` row per
    /// fold (for single-label data micro precision, recall and F1 all equal
    /// accuracy), then `mean` rows over folds.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        let row = |out: &mut String, fold: &str, class: &str, p: f64, r: f64, f: f64, flag: bool| {
            let _ = writeln!(out, "{fold},{class},{p:.6},{r:.6},{f:.6},{}", u8::from(flag));
        };
        for (fold, _, m) in &self.folds {
            let fold = fold.to_string();
            for (c, cm) in m.per_class.iter().enumerate() {
                let name = Label::from_index(c).map(|l| l.as_str().to_string()).unwrap_or_else(|_| c.to_string());
                row(&mut out, &fold, &name, cm.precision, cm.recall, cm.f1, cm.flagged);
            }
            let any = m.per_class.iter().any(|c| c.flagged);
            row(&mut out, &fold, "macro", m.macro_precision, m.macro_recall, m.macro_f1, any);
            row(&mut out, &fold, "accuracy", m.accuracy, m.accuracy, m.accuracy, false);
        }
        let n = self.folds.len().max(1) as f64;
        let mean = |f: &dyn Fn(&Metrics) -> f64| self.folds.iter().map(|(_, _, m)| f(m)).sum::<f64>() / n;
        row(
            &mut out,
            "mean",
            "macro",
            mean(&|m| m.macro_precision),
            mean(&|m| m.macro_recall),
            mean(&|m| m.macro_f1),
            false,
        );
        let acc = self.mean_accuracy();
        row(&mut out, "mean", "accuracy", acc, acc, acc, false);
        out
    }
}

/// Runs `train_eval(fold, train_indices, test_indices)` for each of the `k`
/// folds of `manifest`; it returns `(labels, predictions)` on the held-out
/// fold.
pub fn cv_evaluate(
    manifest: &Manifest,
    k: usize,
    num_classes: usize,
    mut train_eval: impl FnMut(usize, &[usize], &[usize]) -> Result<(Vec<usize>, Vec<usize>)>,
) -> Result<CvReport> {
    if k < 2 {
        return Err(Error::Input(format!("cross-validation needs k >= 2, got {k}")));
    }
    let folds = manifest.num_folds()?;
    if folds != k {
        return Err(Error::Input(format!("manifest has {folds} folds, expected {k}")));
    }
    let mut report = CvReport { folds: Vec::new() };
    for fold in 0..k {
        let (train, test) = manifest.partition(fold);
        let (labels, preds) = train_eval(fold, &train, &test)?;
        let cm = ConfusionMatrix::from_predictions(&labels, &preds, num_classes)?;
        let m = metrics(&cm)?;
        report.folds.push((fold, cm, m));
    }
    Ok(report)
}

/// Min-max scaling to [0, 1]; a constant input maps to 0.5.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(1.0)) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Patch saliency from the last block: for each patch token, the L2 distance
/// of its output embedding from the image's mean patch embedding,
/// min-max normalized.
#[derive(Clone, Debug)]
pub struct Saliency {
    /// `[gh, gw]`.
    pub grid: Tensor<f64>,
    /// `[H, W]`, bilinearly upsampled.
    pub map: Tensor<f64>,
}

pub fn attention_saliency<T: Scalar>(model: &CsvtModel<T>, image: &Tensor<T>) -> Result<Saliency> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let f = model.forward_features(&mut tape, &bound, std::slice::from_ref(image), Mode::Eval)?;
    let tokens = tape.value(f.tokens);
    let (rows, d) = tokens.dims2()?;
    let (gh, gw) = f.grid;
    let n = gh * gw;
    debug_assert_eq!(rows, n + 1);
    let patch = |i: usize| &tokens.data()[(i + 1) * d..(i + 2) * d];
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(patch(i)) {
            *m += v.to_f64().unwrap() / n as f64;
        }
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            patch(i)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v.to_f64().unwrap() - m).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let grid = Tensor::new(vec![gh, gw], normalize_unit(&raw))?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let up = imageops::resize_bilinear(&grid.clone().reshape(vec![gh, gw, 1])?, h, w)?;
    Ok(Saliency {
        grid,
        map: up.reshape(vec![h, w])?,
    })
}

/// 8-bit binary PGM (P5) of a `[h, w]` map with values in [0, 1].
pub fn encode_pgm(map: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(bytes)
}
