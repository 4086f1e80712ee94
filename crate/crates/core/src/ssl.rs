//! Local-to-global self-distillation with an EMA teacher.
//!
//! The student sees every view; the teacher sees only the two global views.
//! Both feed the mean of their last-block tokens to a projection head.
//! Teacher logits are centered and sharpened, and the student is trained to
//! match them on every (teacher global, student view) pair of differing views.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{multi_crop, CropSet, MultiCropConfig};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::model::{CsvtConfig, CsvtModel, Mode};
use crate::ops;
use crate::optim::{clip_global_norm, cosine, warmup_cosine, AdamW};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAMBDA_START: f64 = 0.996;

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: (f64, f64),
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    /// Subtract the running center from teacher logits.
    pub centering: bool,
    pub proj_hidden: usize,
    pub proj_bottleneck: usize,
    pub out_dim: usize,
    pub clip_grad: f64,
    pub multi_crop: MultiCropConfig,
    /// Stop once the teacher entropy falls below this value.
    pub stop_below_entropy: Option<f64>,
}

impl SslConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 2,
            weight_decay: (0.04, 0.4),
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            centering: true,
            proj_hidden: 512,
            proj_bottleneck: 128,
            out_dim: 256,
            clip_grad: 3.0,
            multi_crop: MultiCropConfig::desk(),
            stop_below_entropy: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            warmup_epochs: 10,
            proj_hidden: 2048,
            proj_bottleneck: 256,
            multi_crop: MultiCropConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("ssl batch_size must be positive");
        }
        if self.teacher_temp <= 0.0 || self.student_temp <= 0.0 {
            return bad("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return bad("center momentum must lie in [0, 1]");
        }
        if self.out_dim < 2 {
            return bad("projection output dimension must be at least 2");
        }
        Ok(())
    }
}

/// `λ(t) = 1 - (1 - 0.996) (cos(πt/T) + 1) / 2`.
pub fn lambda_schedule(step: usize, total: usize) -> Result<f64> {
    if step > total {
        return Err(Error::Input(format!("step {step} exceeds total {total}")));
    }
    if total == 0 {
        return Ok(1.0);
    }
    let c = ((PI * step as f64 / total as f64).cos() + 1.0) / 2.0;
    Ok(1.0 - (1.0 - LAMBDA_START) * c)
}

/// `θ_t ← λ θ_t + (1 - λ) θ_s` over identically named and shaped tensors.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, lambda: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Input(format!(
            "teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for ((tn, t), (sn, s)) in teacher.iter().zip(student.iter()) {
        if tn != sn || t.shape() != s.shape() {
            return Err(Error::Input(format!("tensor mismatch: teacher {tn} vs student {sn}")));
        }
    }
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = l * *a + r * b;
        }
    }
    Ok(())
}

/// `c ← m c + (1 - m) mean_rows(outputs)`.
pub fn center_update(center: &mut [f64], outputs: &Tensor<f64>, momentum: f64) -> Result<()> {
    let (rows, k) = outputs.dims2()?;
    if rows == 0 || k != center.len() {
        return Err(Error::Input(format!(
            "center of length {} cannot absorb a {rows}x{k} batch",
            center.len()
        )));
    }
    for (j, c) in center.iter_mut().enumerate() {
        let mean = (0..rows).map(|i| outputs.data()[i * k + j]).sum::<f64>() / rows as f64;
        *c = momentum * *c + (1.0 - momentum) * mean;
    }
    Ok(())
}

/// Row-wise `softmax((logits - center) / temp)`.
pub fn teacher_probs(logits: &Tensor<f64>, center: &[f64], temp: f64) -> Result<Tensor<f64>> {
    let (rows, k) = logits.dims2()?;
    if center.len() != k {
        return Err(Error::Input(format!("center length {} vs {k} logits", center.len())));
    }
    let shifted = Tensor::from_fn(vec![rows, k], |i| (logits.data()[i] - center[i % k]) / temp);
    ops::softmax_rows(&shifted)
}

/// `-Σ P_T log P_S` for one teacher/student logit pair.
pub fn distill_loss(teacher: &[f64], student: &[f64], center: &[f64], teacher_temp: f64, student_temp: f64) -> Result<f64> {
    let k = teacher.len();
    if student.len() != k || center.len() != k || k == 0 {
        return Err(Error::Input("teacher, student and center lengths differ".into()));
    }
    let pt = teacher_probs(&Tensor::new(vec![1, k], teacher.to_vec())?, center, teacher_temp)?;
    let s = Tensor::new(vec![1, k], student.iter().map(|v| v / student_temp).collect())?;
    let log_ps = ops::log_softmax_rows(&s)?;
    Ok(-pt.data().iter().zip(log_ps.data()).map(|(p, l)| p * l).sum::<f64>())
}

/// Entropy of the row-averaged distribution.
pub fn mean_entropy(probs: &Tensor<f64>) -> Result<f64> {
    let (rows, k) = probs.dims2()?;
    let mut h = 0.0;
    for j in 0..k {
        let p = (0..rows).map(|i| probs.data()[i * k + j]).sum::<f64>() / rows as f64;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Distillation loss on the tape.
///
/// `student` is `[views * batch, K]` with view-major rows and `teacher_probs`
/// is `[2 * batch, K]` for the two global views, which must be the first two
/// student views. Each student view is paired with every teacher view except
/// itself; the loss is the mean over pairs and images.
pub fn distill_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    teacher_probs: &Tensor<f64>,
    batch: usize,
    student_temp: f64,
) -> Result<Var> {
    let (rows, k) = tape.value(student).dims2()?;
    let (trows, tk) = teacher_probs.dims2()?;
    if batch == 0 || rows % batch != 0 || trows != 2 * batch || tk != k || rows < trows {
        return Err(Error::Input(format!(
            "distillation shapes: student {rows}x{k}, teacher {trows}x{tk}, batch {batch}"
        )));
    }
    let views = rows / batch;
    let pairs = 2 * views - 2;
    let mut target = vec![T::zero(); rows * k];
    for v in 0..views {
        for g in 0..2 {
            if g == v {
                continue;
            }
            for b in 0..batch {
                let dst = (v * batch + b) * k;
                let src = (g * batch + b) * k;
                for j in 0..k {
                    target[dst + j] += T::lit(teacher_probs.data()[src + j]);
                }
            }
        }
    }
    let target = tape.constant(Tensor::new(vec![rows, k], target)?);
    let scaled = tape.scale(student, T::lit(1.0 / student_temp))?;
    let log_ps = tape.log_softmax_rows(scaled)?;
    let prod = tape.mul(target, log_ps)?;
    let total = tape.sum(prod)?;
    tape.scale(total, T::lit(-1.0 / (batch * pairs) as f64))
}

/// Student, teacher and center.
#[derive(Clone, Debug)]
pub struct SslState<T> {
    pub student: CsvtModel<T>,
    pub teacher: CsvtModel<T>,
    pub center: Vec<f64>,
    pub step: usize,
    pub total_steps: usize,
}

impl<T: Scalar> SslState<T> {
    /// Student with a projection head; the teacher starts as an exact copy.
    pub fn new(config: CsvtConfig, ssl: &SslConfig, seed: u64) -> Result<Self> {
        ssl.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut student = CsvtModel::new(config, &mut rng)?;
        student.add_projection_head(ssl.proj_hidden, ssl.proj_bottleneck, ssl.out_dim, &mut rng);
        Ok(Self {
            teacher: student.clone(),
            student,
            center: vec![0.0; ssl.out_dim],
            step: 0,
            total_steps: 0,
        })
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub wd: f64,
    pub lambda: f64,
    pub loss: f64,
    pub teacher_entropy: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,lr,wd,lambda,loss,teacher_entropy";

pub fn loss_log_csv(logs: &[StepLog]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:.17},{:.17e},{:.17e}",
            l.step, l.epoch, l.lr, l.wd, l.lambda, l.loss, l.teacher_entropy
        );
    }
    out
}

/// Seed for the views of image `index` in `epoch`; independent of thread
/// scheduling.
pub fn view_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct StepOutput {
    loss: f64,
    entropy: f64,
}

fn teacher_forward<T: Scalar>(teacher: &mut CsvtModel<T>, globals: &[Tensor<T>]) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let f = teacher.forward_features(&mut tape, &bound, globals, Mode::Train)?;
    let pooled = teacher.pooled(&mut tape, &f)?;
    let out = teacher.forward_projection(&mut tape, &bound, pooled)?;
    let rows = tape.value(f.tokens).dims2()?.0;
    teacher.update_running_stats(&f.bn_stats, rows);
    Ok(tape.value(out).cast())
}

fn ssl_step<T: Scalar>(
    state: &mut SslState<T>,
    opt: &mut AdamW<T>,
    sets: &[CropSet<T>],
    cfg: &SslConfig,
    lr: f64,
    wd: f64,
    lambda: f64,
) -> Result<StepOutput> {
    let batch = sets.len();
    let globals: Vec<Tensor<T>> = (0..2).flat_map(|g| sets.iter().map(move |s| s.globals[g].clone())).collect();
    let num_local = sets[0].locals.len();
    let locals: Vec<Tensor<T>> = (0..num_local)
        .flat_map(|l| sets.iter().map(move |s| s.locals[l].clone()))
        .collect();

    let teacher_out = teacher_forward(&mut state.teacher, &globals)?;
    if cfg.centering && state.step == 0 {
        // start from the first batch mean rather than zero
        center_update(&mut state.center, &teacher_out, 0.0)?;
    }
    let zero_center = vec![0.0; cfg.out_dim];
    let center = if cfg.centering { &state.center } else { &zero_center };
    let probs = teacher_probs(&teacher_out, center, cfg.teacher_temp)?;
    let entropy = mean_entropy(&probs)?;

    let student = &state.student;
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true);
    let fg = student.forward_features(&mut tape, &bound, &globals, Mode::Train)?;
    let pooled = student.pooled(&mut tape, &fg)?;
    let mut outs = vec![student.forward_projection(&mut tape, &bound, pooled)?];
    let mut stats = vec![(fg.bn_stats, tape.value(fg.tokens).dims2()?.0)];
    if !locals.is_empty() {
        let fl = student.forward_features(&mut tape, &bound, &locals, Mode::Train)?;
        let pooled = student.pooled(&mut tape, &fl)?;
        outs.push(student.forward_projection(&mut tape, &bound, pooled)?);
        stats.push((fl.bn_stats, tape.value(fl.tokens).dims2()?.0));
    }
    let all = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
    let loss = distill_loss_tape(&mut tape, all, &probs, batch, cfg.student_temp)?;
    let loss_value = tape.value(loss).item()?.to_f64().unwrap();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("distillation loss"));
    }
    tape.backward(loss)?;
    let mut grads = student.params.grads(&tape, &bound);
    drop(tape);
    if cfg.clip_grad > 0.0 {
        clip_global_norm(&mut grads, cfg.clip_grad);
    }
    opt.step(&mut state.student.params, &grads, lr, wd);
    for (s, rows) in &stats {
        state.student.update_running_stats(s, *rows);
    }
    ema_update(&mut state.teacher.params, &state.student.params, lambda)?;
    if cfg.centering {
        center_update(&mut state.center, &teacher_out, cfg.center_momentum)?;
    }
    Ok(StepOutput {
        loss: loss_value,
        entropy,
    })
}

/// Writes a plain-text description of the training state for post-mortems.
fn dump_state<T: Scalar>(path: &Path, state: &SslState<T>, logs: &[StepLog], reason: &str) {
    let mut s = format!("reason: {reason}\nstep: {} of {}\n", state.step, state.total_steps);
    let finite = state.center.iter().all(|c| c.is_finite());
    let cmax = state.center.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let _ = writeln!(s, "center: finite={finite} max_abs={cmax:e}");
    for (label, model) in [("student", &state.student), ("teacher", &state.teacher)] {
        for (name, t) in model.params.iter() {
            let norm = t.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            let _ = writeln!(s, "{label}.{name} norm={norm:e} finite={}", t.all_finite());
        }
    }
    s.push_str("recent steps:\n");
    s.push_str(&loss_log_csv(&logs[logs.len().saturating_sub(10)..]));
    if let Err(e) = write_atomic(path, s.as_bytes()) {
        log::error!("could not write state dump {}: {e}", path.display());
    }
}

/// Self-distillation pretraining over `images` (`[h,w,3]`, values in [0,1]).
///
/// Returns the final state and one log row per step. On a non-finite value the
/// run aborts with [`Error::Training`], after writing a state dump to
/// `dump_path` when given.
pub fn pretrain<T: Scalar>(
    images: &[Tensor<T>],
    config: CsvtConfig,
    cfg: &SslConfig,
    seed: u64,
    dump_path: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(SslState<T>, Vec<StepLog>)> {
    if images.is_empty() {
        return Err(Error::Input("no images to pretrain on".into()));
    }
    let mut state = SslState::new(config, cfg, seed)?;
    let batch = cfg.batch_size.min(images.len());
    let steps_per_epoch = images.len().div_ceil(batch);
    let total = cfg.epochs * steps_per_epoch;
    state.total_steps = total;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut opt = AdamW::new(&state.student.params);
    let mut logs = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..images.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(view_seed(seed, epoch, usize::MAX)));
        for chunk in order.chunks(batch) {
            let sets: Vec<CropSet<T>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(seed, epoch, i));
                    multi_crop(&images[i], &cfg.multi_crop, &mut rng)
                })
                .collect::<Result<_>>()?;
            let lr = warmup_cosine(state.step, total, warmup, cfg.lr, cfg.min_lr);
            let wd = cosine(state.step, total, cfg.weight_decay.0, cfg.weight_decay.1);
            let lambda = lambda_schedule(state.step, total)?;
            let out = match ssl_step(&mut state, &mut opt, &sets, cfg, lr, wd, lambda) {
                Ok(o) => o,
                Err(e @ Error::NonFinite(_)) => {
                    let reason = format!("step {}: {e}", state.step);
                    if let Some(p) = dump_path {
                        dump_state(p, &state, &logs, &reason);
                    }
                    return Err(Error::Training(reason));
                }
                Err(e) => return Err(e),
            };
            let row = StepLog {
                step: state.step,
                epoch,
                lr,
                wd,
                lambda,
                loss: out.loss,
                teacher_entropy: out.entropy,
            };
            on_step(&row);
            logs.push(row);
            state.step += 1;
            if cfg.stop_below_entropy.is_some_and(|b| out.entropy < b) {
                break 'epochs;
            }
        }
    }
    Ok((state, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_forward_records_nothing_trainable() {
        let cfg = CsvtConfig {
            image_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ..CsvtConfig::desk()
        };
        let ssl = SslConfig {
            proj_hidden: 8,
            proj_bottleneck: 4,
            out_dim: 6,
            ..SslConfig::desk()
        };
        let mut state = SslState::<f64>::new(cfg, &ssl, 0).unwrap();
        let before = state.teacher.params.clone();
        let out = teacher_forward(&mut state.teacher, &[Tensor::full(vec![16, 16, 3], 0.5)]).unwrap();
        assert_eq!(out.shape(), [1, 6]);
        assert!(state.teacher.params.iter().zip(before.iter()).all(|(a, b)| a.1 == b.1));

        // the same binding the teacher uses leaves every node gradient-free
        let mut tape = Tape::new();
        let bound = state.teacher.bind(&mut tape, false);
        let f = state.teacher.forward_features(&mut tape, &bound, &[Tensor::full(vec![16, 16, 3], 0.5)], Mode::Train).unwrap();
        assert!(bound.vars().iter().all(|&v| !tape.requires_grad(v)));
        assert!(!tape.requires_grad(f.tokens));
    }

    #[test]
    fn lambda_endpoints_and_midpoint() {
        assert!((lambda_schedule(0, 100).unwrap() - 0.996).abs() < 1e-15);
        assert!((lambda_schedule(100, 100).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambda_schedule(50, 100).unwrap() - 0.998).abs() < 1e-15);
        assert!(lambda_schedule(101, 100).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let mk = |v: f64| {
            let mut p = ParamSet::<f64>::new();
            p.insert("w", Tensor::full(vec![2], v));
            p
        };
        let s = mk(4.0);
        let mut t = mk(2.0);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.expect("w").data(), &[2.0, 2.0]);
        ema_update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.expect("w").data(), &[3.0, 3.0]);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.expect("w").data(), &[4.0, 4.0]);
    }

    #[test]
    fn ema_rejects_tree_mismatch() {
        let mut t = ParamSet::<f64>::new();
        t.insert("a", Tensor::zeros(vec![2]));
        let mut s = ParamSet::<f64>::new();
        s.insert("b", Tensor::zeros(vec![2]));
        assert!(ema_update(&mut t, &s, 0.5).is_err());
        let mut s2 = ParamSet::<f64>::new();
        s2.insert("a", Tensor::zeros(vec![3]));
        assert!(ema_update(&mut t, &s2, 0.5).is_err());
    }

    #[test]
    fn uniform_distributions_give_ln_k() {
        let z = [0.0; 4];
        let l = distill_loss(&z, &z, &z, 0.04, 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_match_gives_near_zero_loss() {
        let t = [10.0, 0.0, 0.0];
        let s = [100.0, 0.0, 0.0];
        let l = distill_loss(&t, &s, &[0.0; 3], 0.04, 0.1).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn center_update_endpoints() {
        let out = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut c = vec![5.0, 5.0];
        center_update(&mut c, &out, 1.0).unwrap();
        assert_eq!(c, vec![5.0, 5.0]);
        center_update(&mut c, &out, 0.0).unwrap();
        assert_eq!(c, vec![2.0, 4.0]);
        let centered: Vec<f64> = out.data().iter().enumerate().map(|(i, v)| v - c[i % 2]).collect();
        assert_eq!(centered[0] + centered[2], 0.0);
        assert_eq!(centered[1] + centered[3], 0.0);
        assert!(center_update(&mut c, &Tensor::zeros(vec![0, 2]), 0.5).is_err());
    }

    #[test]
    fn tape_loss_matches_pairwise_sum() {
        let batch = 2;
        let k = 3;
        let student = Tensor::<f64>::from_fn(vec![3 * batch, k], |i| (i as f64 * 0.37).sin());
        let teacher = Tensor::<f64>::from_fn(vec![2 * batch, k], |i| (i as f64 * 0.71).cos());
        let center = vec![0.1, -0.2, 0.05];
        let probs = teacher_probs(&teacher, &center, 0.04).unwrap();
        let mut tape = Tape::new();
        let s = tape.param(student.clone());
        let l = distill_loss_tape(&mut tape, s, &probs, batch, 0.1).unwrap();
        let got = tape.value(l).item().unwrap();

        let mut want = 0.0;
        let mut pairs = 0;
        for v in 0..3 {
            for g in 0..2 {
                if g == v {
                    continue;
                }
                for b in 0..batch {
                    want += distill_loss(teacher.row(g * batch + b), student.row(v * batch + b), &center, 0.04, 0.1).unwrap();
                    pairs += 1;
                }
            }
        }
        assert!((got - want / pairs as f64).abs() < 1e-12);
    }

    #[test]
    fn view_seeds_differ() {
        assert_ne!(view_seed(1, 0, 0), view_seed(1, 0, 1));
        assert_ne!(view_seed(1, 0, 0), view_seed(1, 1, 0));
        assert_ne!(view_seed(1, 0, 0), view_seed(2, 0, 0));
    }
}
