//! Supervised fine-tuning and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::sample_rect;
use crate::data::{label_smooth, mixup, one_hot};
use crate::error::{Error, Result};
use crate::imageops;
use crate::model::{CsvtModel, Mode};
use crate::optim::{clip_global_norm, warmup_cosine, AdamW};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Gradient-norm cap; 0 disables clipping.
    pub clip_grad: f64,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 3,
            weight_decay: 0.05,
            mixup_alpha: 0.2,
            label_smoothing: 0.1,
            crop_scale: (0.35, 1.0),
            flip_prob: 0.5,
            clip_grad: 0.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            warmup_epochs: 20,
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Random resized crop to `size × size` followed by a random flip.
pub fn train_view<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<T>,
    size: usize,
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let r = sample_rect(h, w, cfg.crop_scale, true, rng);
    let view = imageops::crop(image, r.top, r.left, r.height, r.width)?;
    let view = imageops::resize_bilinear(&view, size, size)?;
    if rng.gen::<f64>() < cfg.flip_prob {
        imageops::hflip(&view)
    } else {
        Ok(view)
    }
}

/// Resizes to the model's nominal input size when needed.
pub fn eval_view<T: Scalar>(image: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    imageops::resize_bilinear(image, size, size)
}

/// Mean soft-target cross-entropy of `logits` against `targets`.
fn soft_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: crate::Var, targets: &[Vec<f64>]) -> Result<crate::Var> {
    let (rows, k) = tape.value(logits).dims2()?;
    let flat = targets.iter().flatten().map(|&v| T::lit(v)).collect();
    let t = tape.constant(Tensor::new(vec![rows, k], flat)?);
    let logp = tape.log_softmax_rows(logits)?;
    let prod = tape.mul(t, logp)?;
    let total = tape.sum(prod)?;
    tape.scale(total, T::lit(-1.0 / rows as f64))
}

/// Trains `model` on `(image, class)` pairs with mixup and label smoothing.
pub fn finetune<T: Scalar>(
    model: &mut CsvtModel<T>,
    train: &[(Tensor<T>, usize)],
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Ok(Vec::new());
    }
    let k = model.config.num_classes;
    if let Some((_, c)) = train.iter().find(|(_, c)| *c >= k) {
        return Err(Error::Input(format!("class {c} outside 0..{k}")));
    }
    let size = model.config.image_size;
    let batch = cfg.batch_size.clamp(1, train.len());
    let steps_per_epoch = train.len().div_ceil(batch);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut opt = AdamW::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                images.push(train_view(&train[i].0, size, cfg, &mut rng)?);
                targets.push(label_smooth(&one_hot(train[i].1, k), cfg.label_smoothing));
            }
            if images.len() >= 2 && cfg.mixup_alpha > 0.0 {
                let (x, y, _) = mixup(&images, &targets, cfg.mixup_alpha, &mut rng)?;
                images = x;
                targets = y;
            }
            lr = warmup_cosine(step, total, warmup, cfg.lr, cfg.min_lr);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let (logits, f) = model.forward_logits(&mut tape, &bound, &images, Mode::Train)?;
            let loss = soft_cross_entropy(&mut tape, logits, &targets)?;
            let value = tape.value(loss).item()?.to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let mut grads = model.params.grads(&tape, &bound);
            let rows = tape.value(f.tokens).dims2()?.0;
            drop(tape);
            if cfg.clip_grad > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_grad);
            }
            opt.step(&mut model.params, &grads, lr, cfg.weight_decay);
            model.update_running_stats(&f.bn_stats, rows);
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Arg-max class per image, evaluated in batches of `batch_size`.
pub fn predict<T: Scalar>(model: &CsvtModel<T>, images: &[Tensor<T>], batch_size: usize) -> Result<Vec<usize>> {
    let size = model.config.image_size;
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let views = chunk.iter().map(|im| eval_view(im, size)).collect::<Result<Vec<_>>>()?;
        let logits = model.predict_logits(&views)?;
        let (rows, k) = logits.dims2()?;
        for r in 0..rows {
            let row = &logits.data()[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            preds.push(best);
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::CsvtConfig;

    fn tiny() -> CsvtConfig {
        CsvtConfig {
            image_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ..CsvtConfig::desk()
        }
    }

    #[test]
    fn zero_epochs_leaves_weights() {
        let mut model = CsvtModel::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = model.params.clone();
        let data = vec![(Tensor::full(vec![16, 16, 3], 0.5), 1)];
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::desk()
        };
        assert!(finetune(&mut model, &data, &cfg, 0, |_| {}).unwrap().is_empty());
        assert_eq!(model.params.iter().count(), before.iter().count());
        assert!(model.params.iter().zip(before.iter()).all(|(a, b)| a.1 == b.1));
    }

    #[test]
    fn loss_falls_on_a_separable_toy_set() {
        let mut model = CsvtModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let data: Vec<_> = (0..8)
            .map(|i| {
                // class 0 has horizontal stripes, class 1 vertical ones
                let img = Tensor::from_fn(vec![16, 16, 3], |j| {
                    let (r, c) = (j / 48, (j / 3) % 16);
                    let t = if i % 2 == 0 { r } else { c };
                    if t % 4 < 2 { 0.9 } else { 0.1 }
                });
                (img, i % 2)
            })
            .collect();
        let cfg = FinetuneConfig {
            epochs: 60,
            batch_size: 4,
            lr: 3e-3,
            warmup_epochs: 1,
            mixup_alpha: 0.0,
            crop_scale: (0.9, 1.0),
            ..FinetuneConfig::desk()
        };
        let logs = finetune(&mut model, &data, &cfg, 2, |_| {}).unwrap();
        assert!(logs.last().unwrap().loss < logs[0].loss);
        let preds = predict(&model, &data.iter().map(|d| d.0.clone()).collect::<Vec<_>>(), 4).unwrap();
        assert_eq!(preds, vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn out_of_range_class_rejected() {
        let mut model = CsvtModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data = vec![(Tensor::full(vec![16, 16, 3], 0.5), 9)];
        assert!(finetune(&mut model, &data, &FinetuneConfig::desk(), 0, |_| {}).is_err());
    }
}
