//! Finite-difference gradient checks and plain-loop reference
//! implementations, for tests only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{block_name, CsvtConfig, CsvtModel, Mode};
use crate::ops::{BN_EPS, LN_EPS};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tape::{BatchNormMode, Tape, Var};
use crate::tensor::Tensor;

/// A scalar-valued function of tensor inputs, recorded on a tape.
pub trait TapeFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

fn value_f64<F: TapeFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Analytic gradients in precision `T` at `inputs`.
pub fn analytic_grads<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| match tape.grad(v) {
            Some(g) => g.cast(),
            None => Tensor::zeros(x.shape().to_vec()),
        })
        .collect())
}

/// Fourth-order central difference of `g` at 0:
/// `(-g(2h) + 8g(h) - 8g(-h) + g(-2h)) / 12h`.
fn central<G: FnMut(f64) -> Result<f64>>(mut g: G, h: f64) -> Result<f64> {
    let (a, b, c, d) = (g(2.0 * h)?, g(h)?, g(-h)?, g(-2.0 * h)?);
    Ok((-a + 8.0 * b - 8.0 * c + d) / (12.0 * h))
}

fn coordinate_diff<F: TapeFn>(f: &F, inputs: &[Tensor<f64>], i: usize, j: usize, h: f64) -> Result<f64> {
    let mut xs = inputs.to_vec();
    let x0 = inputs[i].data()[j];
    central(
        |s| {
            xs[i].data_mut()[j] = x0 + s;
            value_f64(f, &xs)
        },
        h,
    )
}

/// Central differences in f64 for every coordinate of every input.
pub fn numeric_grads<F: TapeFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            g.data_mut()[j] = coordinate_diff(f, inputs, i, j, h)?;
        }
        out.push(g);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all tensors jointly; 0 when both vanish.
pub fn normwise_rel_err(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Relative error of `T`-precision autodiff against f64 central differences.
pub fn grad_check<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let a = analytic_grads::<T, F>(f, inputs)?;
    let n = numeric_grads(f, inputs, h)?;
    Ok(normwise_rel_err(&a, &n))
}

/// One differentiable tape operation, reduced to a scalar by a fixed
/// weighted sum of its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCase {
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulScalar,
    Exp,
    Log,
    Relu,
    Gelu,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm,
    BatchNormBatch,
    BatchNormRunning,
    DepthwiseConv,
    L2NormalizeCols,
    L2NormalizeRows,
    Reshape,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    GroupMean,
    Sum,
    Mean,
}

impl OpCase {
    pub const ALL: [OpCase; 28] = [
        OpCase::Matmul,
        OpCase::Transpose,
        OpCase::Add,
        OpCase::Sub,
        OpCase::Mul,
        OpCase::Scale,
        OpCase::AddRow,
        OpCase::MulScalar,
        OpCase::Exp,
        OpCase::Log,
        OpCase::Relu,
        OpCase::Gelu,
        OpCase::SoftmaxRows,
        OpCase::LogSoftmaxRows,
        OpCase::LayerNorm,
        OpCase::BatchNormBatch,
        OpCase::BatchNormRunning,
        OpCase::DepthwiseConv,
        OpCase::L2NormalizeCols,
        OpCase::L2NormalizeRows,
        OpCase::Reshape,
        OpCase::SliceCols,
        OpCase::ConcatCols,
        OpCase::SliceRows,
        OpCase::ConcatRows,
        OpCase::GroupMean,
        OpCase::Sum,
        OpCase::Mean,
    ];

    /// Random inputs of a small valid shape. Values stay away from the
    /// ReLU kink and the log singularity.
    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = |shape: Vec<usize>| away_from_zero(shape, &mut rng);
        match self {
            OpCase::Matmul => vec![n(vec![3, 4]), n(vec![4, 5])],
            OpCase::Add | OpCase::Sub | OpCase::Mul | OpCase::ConcatCols | OpCase::ConcatRows => {
                vec![n(vec![3, 4]), n(vec![3, 4])]
            }
            OpCase::AddRow => vec![n(vec![3, 4]), n(vec![4])],
            OpCase::MulScalar => vec![n(vec![3, 4]), n(vec![1, 1])],
            OpCase::Log => vec![n(vec![3, 4]).map(|v| v.abs() + 0.2)],
            OpCase::LayerNorm | OpCase::BatchNormBatch | OpCase::BatchNormRunning => {
                vec![n(vec![5, 4]), n(vec![4]), n(vec![4])]
            }
            OpCase::DepthwiseConv => vec![n(vec![2, 3, 4, 3]), n(vec![3, 3, 3])],
            OpCase::GroupMean => vec![n(vec![6, 3])],
            _ => vec![n(vec![3, 4])],
        }
    }
}

fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = Tensor::from_fn(shape, |i| T::lit(((i * 37 + 11) % 17) as f64 / 17.0 - 0.4));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

impl TapeFn for OpCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let out = match self {
            OpCase::Matmul => tape.matmul(v[0], v[1])?,
            OpCase::Transpose => tape.transpose(v[0])?,
            OpCase::Add => tape.add(v[0], v[1])?,
            OpCase::Sub => tape.sub(v[0], v[1])?,
            OpCase::Mul => tape.mul(v[0], v[1])?,
            OpCase::Scale => tape.scale(v[0], T::lit(-1.7))?,
            OpCase::AddRow => tape.add_row(v[0], v[1])?,
            OpCase::MulScalar => tape.mul_scalar(v[0], v[1])?,
            OpCase::Exp => tape.exp(v[0])?,
            OpCase::Log => tape.log(v[0])?,
            OpCase::Relu => tape.relu(v[0])?,
            OpCase::Gelu => tape.gelu(v[0])?,
            OpCase::SoftmaxRows => tape.softmax_rows(v[0])?,
            OpCase::LogSoftmaxRows => tape.log_softmax_rows(v[0])?,
            OpCase::LayerNorm => tape.layer_norm(v[0], v[1], v[2])?,
            OpCase::BatchNormBatch => tape.batch_norm(v[0], v[1], v[2], BatchNormMode::Batch)?.0,
            OpCase::BatchNormRunning => {
                let mean = [0.1, -0.2, 0.3, 0.0].map(T::lit);
                let var = [0.5, 1.0, 2.0, 0.8].map(T::lit);
                tape.batch_norm(v[0], v[1], v[2], BatchNormMode::Running { mean: &mean, var: &var })?.0
            }
            OpCase::DepthwiseConv => tape.depthwise_conv3x3(v[0], v[1])?,
            OpCase::L2NormalizeCols => tape.l2_normalize_cols(v[0])?,
            OpCase::L2NormalizeRows => tape.l2_normalize_rows(v[0])?,
            OpCase::Reshape => tape.reshape(v[0], &[2, 6])?,
            OpCase::SliceCols => tape.slice_cols(v[0], 1, 2)?,
            OpCase::ConcatCols => tape.concat_cols(&[v[0], v[1], v[0]])?,
            OpCase::SliceRows => tape.slice_rows(v[0], 1, 2)?,
            OpCase::ConcatRows => tape.concat_rows(&[v[1], v[0]])?,
            OpCase::GroupMean => tape.group_mean(v[0], 3)?,
            OpCase::Sum => tape.sum(v[0])?,
            OpCase::Mean => tape.mean(v[0])?,
        };
        weighted_sum(tape, out)
    }
}

/// Full training objective of a small model as a function of all its
/// parameters: classification cross-entropy in training mode plus a
/// distillation term on the projection head against fixed targets.
pub struct ModelLoss {
    pub config: CsvtConfig,
    pub images: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub head: (usize, usize, usize),
    pub targets: Tensor<f64>,
}

impl ModelLoss {
    pub fn new(config: CsvtConfig, image_size: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..batch)
            .map(|_| Tensor::uniform(vec![image_size, image_size, 3], 0.0, 1.0, &mut rng))
            .collect();
        let labels = (0..batch).map(|i| i % config.num_classes).collect();
        let head = (16, 8, 6);
        let raw = Tensor::uniform(vec![batch, head.2], 0.0, 1.0, &mut rng);
        let targets = Tensor::from_fn(vec![batch, head.2], |i| {
            let r = i / head.2;
            raw.data()[i] / raw.row(r).iter().sum::<f64>()
        });
        Self {
            config,
            images,
            labels,
            head,
            targets,
        }
    }

    pub fn model<T: Scalar>(&self, seed: u64) -> Result<CsvtModel<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = CsvtModel::new(self.config.clone(), &mut rng)?;
        m.add_projection_head(self.head.0, self.head.1, self.head.2, &mut rng);
        Ok(m)
    }

    /// A generic evaluation point: initial weights plus N(0, 0.1²) noise
    /// on every entry, so no bias sits at zero and no norm is near zero.
    pub fn params(&self, seed: u64) -> Result<Vec<Tensor<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        Ok(self
            .model::<f64>(seed)?
            .params
            .iter()
            .map(|(_, t)| {
                let noise: Tensor<f64> = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng);
                Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + noise.data()[i])
            })
            .collect())
    }
}

impl TapeFn for ModelLoss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let model = self.model::<T>(0)?;
        let bound = Bound::from_vars(inputs.to_vec());
        let images: Vec<Tensor<T>> = self.images.iter().map(Tensor::cast).collect();
        let (logits, f) = model.forward_logits(tape, &bound, &images, Mode::Train)?;
        let b = images.len();
        let k = self.config.num_classes;
        let onehot = Tensor::from_fn(vec![b, k], |i| if self.labels[i / k] == i % k { T::one() } else { T::zero() });
        let onehot = tape.constant(onehot);
        let logp = tape.log_softmax_rows(logits)?;
        let picked = tape.mul(onehot, logp)?;
        let ce = tape.sum(picked)?;
        let ce = tape.scale(ce, T::lit(-1.0 / b as f64))?;
        let emb = model.pooled(tape, &f)?;
        let proj = model.forward_projection(tape, &bound, emb)?;
        let proj = tape.scale(proj, T::lit(10.0))?;
        let logq = tape.log_softmax_rows(proj)?;
        let t = tape.constant(self.targets.cast());
        let prod = tape.mul(t, logq)?;
        let distill = tape.sum(prod)?;
        let distill = tape.scale(distill, T::lit(-1.0 / b as f64))?;
        tape.add(ce, distill)
    }
}

/// Checks a many-parameter function without a full finite-difference sweep.
/// Returns normwise relative errors of `(directional derivatives along
/// random unit directions, sampled coordinates)`, with `per_tensor`
/// coordinates drawn from each input.
pub fn sampled_grad_check<T: Scalar, F: TapeFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    directions: usize,
    per_tensor: usize,
    seed: u64,
    h: f64,
) -> Result<(f64, f64)> {
    let grads = analytic_grads::<T, F>(f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = |dir: &[Tensor<f64>], s: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(dir)
            .map(|(x, d)| Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + s * d.data()[i]))
            .collect()
    };
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for _ in 0..directions {
        let mut dir: Vec<Tensor<f64>> = inputs.iter().map(|x| Tensor::randn(x.shape().to_vec(), 1.0, &mut rng)).collect();
        let norm = dir.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= norm));
        let g: f64 = grads.iter().zip(&dir).flat_map(|(g, d)| g.data().iter().zip(d.data())).map(|(a, b)| a * b).sum();
        let fd = central(|t| value_f64(f, &shift(&dir, t)), h)?;
        ana.push(g);
        num.push(fd);
    }
    let dir_err = normwise_rel_err(&[Tensor::new(vec![ana.len()], ana)?], &[Tensor::new(vec![num.len()], num)?]);

    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for (i, x) in inputs.iter().enumerate() {
        for _ in 0..per_tensor.min(x.numel()) {
            let j = rng.gen_range(0..x.numel());
            ana.push(grads[i].data()[j]);
            num.push(coordinate_diff(f, inputs, i, j, h)?);
        }
    }
    let coord_err = normwise_rel_err(&[Tensor::new(vec![ana.len()], ana)?], &[Tensor::new(vec![num.len()], num)?]);
    Ok((dir_err, coord_err))
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

pub fn naive_softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = x.dims2().unwrap();
    let mut out = x.clone();
    for i in 0..r {
        let m = x.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.row(i).iter().map(|v| (v - m).exp()).sum();
        for j in 0..c {
            out.data_mut()[i * c + j] = (x.at(&[i, j]) - m).exp() / z;
        }
    }
    out
}

/// Depthwise 3x3 convolution over an explicitly zero-padded copy of `[b,h,w,c]`.
pub fn naive_depthwise_conv(x: &Tensor<f64>, kernel: &Tensor<f64>) -> Tensor<f64> {
    let [b, h, w, c] = x.shape()[..] else { panic!("expected [b,h,w,c]") };
    let mut padded = vec![0.0; b * (h + 2) * (w + 2) * c];
    let pidx = |n: usize, i: usize, j: usize, ch: usize| ((n * (h + 2) + i) * (w + 2) + j) * c + ch;
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    padded[pidx(n, i + 1, j + 1, ch)] = x.at(&[n, i, j, ch]);
                }
            }
        }
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            s += padded[pidx(n, i + di, j + dj, ch)] * kernel.at(&[di, dj, ch]);
                        }
                    }
                    out.data_mut()[((n * h + i) * w + j) * c + ch] = s;
                }
            }
        }
    }
    out
}

fn naive_layer_norm(x: &[Vec<f64>], gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + LN_EPS).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let c = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()
}

fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (din, dout) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.at(&[i, o])).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Channel attention block on one image's `[n, d]` tokens, written with
/// explicit sums: per head, `A[i][j] = softmax_j(Σ_t k̂[t][i] q̂[t][j] / τ)` over
/// L2-normalized columns and `out[t][i] = Σ_j v[t][j] A[i][j]`.
pub fn naive_cba(model: &CsvtModel<f64>, block: usize, x: &Tensor<f64>) -> Tensor<f64> {
    let p = |s: &str| model.params.expect(&block_name(block, s));
    let xr = rows_of(x);
    let n = xr.len();
    let (q, k, v) = (
        affine(&xr, p("wq"), p("bq")),
        affine(&xr, p("wk"), p("bk")),
        affine(&xr, p("wv"), p("bv")),
    );
    let dh = model.config.head_dim();
    let d = model.config.embed_dim;
    let mut cat = vec![vec![0.0; d]; n];
    for h in 0..model.config.num_heads {
        let tau = p("log_tau").data()[h].exp();
        let col = |m: &Vec<Vec<f64>>, c: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|t| m[t][h * dh + c]).collect();
            let norm = raw.iter().map(|a| a * a).sum::<f64>().sqrt().max(crate::ops::L2_EPS);
            raw.iter().map(|a| a / norm).collect()
        };
        let qn: Vec<Vec<f64>> = (0..dh).map(|c| col(&q, c)).collect();
        let kn: Vec<Vec<f64>> = (0..dh).map(|c| col(&k, c)).collect();
        let mut logits = Tensor::zeros(vec![dh, dh]);
        #[allow(clippy::needless_range_loop)]
        for i in 0..dh {
            for j in 0..dh {
                let dot: f64 = (0..n).map(|t| kn[i][t] * qn[j][t]).sum();
                logits.data_mut()[i * dh + j] = dot / tau;
            }
        }
        let attn = naive_softmax_rows(&logits);
        for t in 0..n {
            for i in 0..dh {
                cat[t][h * dh + i] = (0..dh).map(|j| v[t][h * dh + j] * attn.at(&[i, j])).sum();
            }
        }
    }
    let proj = affine(&cat, p("wout"), p("bout"));
    let res: Vec<Vec<f64>> = proj.iter().zip(&xr).map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect()).collect();
    to_tensor(&naive_layer_norm(&res, p("ln1.gamma"), p("ln1.beta")))
}

/// Spatial block on `[batch * n, d]` patch tokens (no class token) with
/// batch statistics, matching the training-mode forward.
pub fn naive_sib(model: &CsvtModel<f64>, block: usize, x: &Tensor<f64>, grid: (usize, usize)) -> Tensor<f64> {
    let p = |s: &str| model.params.expect(&block_name(block, s));
    let (rows, d) = x.dims2().unwrap();
    let n = grid.0 * grid.1;
    let batch = rows / n;
    let img = x.clone().reshape(vec![batch, grid.0, grid.1, d]).unwrap();
    let c1 = naive_depthwise_conv(&img, p("sib.conv1")).reshape(vec![rows, d]).unwrap();
    let mut act = c1.clone();
    for ch in 0..d {
        let mean = (0..rows).map(|r| c1.at(&[r, ch])).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (c1.at(&[r, ch]) - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            let y = (c1.at(&[r, ch]) - mean) / (var + BN_EPS).sqrt() * p("sib.bn.gamma").data()[ch]
                + p("sib.bn.beta").data()[ch];
            act.data_mut()[r * d + ch] = y.max(0.0);
        }
    }
    let act = act.reshape(vec![batch, grid.0, grid.1, d]).unwrap();
    let c2 = naive_depthwise_conv(&act, p("sib.conv2")).reshape(vec![rows, d]).unwrap();
    let bias = p("sib.conv2_bias");
    let res: Vec<Vec<f64>> = (0..rows)
        .map(|r| (0..d).map(|ch| x.at(&[r, ch]) + c2.at(&[r, ch]) + bias.data()[ch]).collect())
        .collect();
    to_tensor(&naive_layer_norm(&res, p("ln2.gamma"), p("ln2.beta")))
}

/// Per-class `(precision, recall, f1)` and accuracy by direct counting over
/// the label lists; zero denominators give 0.
pub fn naive_metrics(labels: &[usize], preds: &[usize], k: usize) -> (Vec<(f64, f64, f64)>, f64) {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let per_class = (0..k)
        .map(|c| {
            let pairs = labels.iter().zip(preds);
            let tp = pairs.clone().filter(|(&l, &p)| l == c && p == c).count() as f64;
            let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
            let actual = labels.iter().filter(|&&l| l == c).count() as f64;
            let (pr, rc) = (div(tp, predicted), div(tp, actual));
            (pr, rc, div(2.0 * pr * rc, pr + rc))
        })
        .collect();
    let correct = labels.iter().zip(preds).filter(|(l, p)| l == p).count() as f64;
    (per_class, correct / labels.len() as f64)
}

/// f32 and f64 copies of one randomly initialized model with identical,
/// f32-representable weights drawn at scale `std`.
pub fn model_pair(config: &CsvtConfig, std: f64, seed: u64) -> Result<(CsvtModel<f32>, CsvtModel<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m32 = CsvtModel::<f32>::new(config.clone(), &mut rng)?;
    let mut m64 = CsvtModel::<f64>::new(config.clone(), &mut rng)?;
    let names: Vec<String> = m32.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = m32.params.expect(&name).shape().to_vec();
        let mut t = Tensor::<f32>::randn(shape, std, &mut rng);
        if name.ends_with("gamma") {
            t = t.map(|v| v + 1.0);
        }
        m64.params.insert(name.clone(), t.cast());
        m32.params.insert(name, t);
    }
    Ok((m32, m64))
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    a.cast::<f64>().max_abs_diff(b).unwrap_or(f64::INFINITY)
}

fn random_f32(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, rng)
}

/// Largest absolute deviation of the f32 engine from the plain-loop f64
/// references over `instances` random problems per component, keyed by
/// component name.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![("matmul", 0.0f64), ("softmax", 0.0), ("depthwise_conv", 0.0), ("cba", 0.0), ("sib", 0.0), ("metrics", 0.0)];
    let mut note = |i: usize, e: f64| worst[i].1 = worst[i].1.max(e);
    for _ in 0..instances {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..6));
        let a = random_f32(vec![m, k], &mut rng);
        let b = random_f32(vec![k, n], &mut rng);
        note(0, max_diff(&crate::ops::matmul(&a, &b)?, &naive_matmul(&a.cast(), &b.cast())));

        let x = random_f32(vec![m, k], &mut rng).map(|v| v * 4.0);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let s = tape.softmax_rows(xv)?;
        note(1, max_diff(tape.value(s), &naive_softmax_rows(&x.cast())));

        let shape = vec![rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
        let img = random_f32(shape.clone(), &mut rng);
        let ker = random_f32(vec![3, 3, shape[3]], &mut rng);
        note(2, max_diff(&crate::ops::depthwise_conv3x3(&img, &ker)?, &naive_depthwise_conv(&img.cast(), &ker.cast())));

        let heads = rng.gen_range(1..4);
        let cfg = CsvtConfig {
            image_size: 16,
            embed_dim: heads * rng.gen_range(2..5),
            num_layers: 1,
            num_heads: heads,
            ..CsvtConfig::desk()
        };
        let (m32, m64) = model_pair(&cfg, 0.5, rng.gen())?;
        let tokens = rng.gen_range(2..9);
        let x = random_f32(vec![tokens, cfg.embed_dim], &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = m32.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = m32.cba_forward(&mut tape, &bound, 0, xv, tokens)?;
        note(3, max_diff(tape.value(y), &naive_cba(&m64, 0, &x.cast())));

        let grid = (rng.gen_range(1..4), rng.gen_range(1..4));
        let batch = rng.gen_range(1..3);
        let rows = batch * grid.0 * grid.1;
        if rows > 1 {
            let x = random_f32(vec![rows, cfg.embed_dim], &mut rng);
            let mut tape = Tape::<f32>::new();
            let bound = m32.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let (y, _) = m32.sib_forward(&mut tape, &bound, &m32.buffers, 0, xv, grid, false, Mode::BatchStats)?;
            note(4, max_diff(tape.value(y), &naive_sib(&m64, 0, &x.cast(), grid)));
        }

        let classes = rng.gen_range(2..6);
        let len = rng.gen_range(1..60);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..classes)).collect();
        let preds: Vec<usize> = labels.iter().map(|&l| if rng.gen_bool(0.7) { l } else { rng.gen_range(0..classes) }).collect();
        let cm = crate::metrics::ConfusionMatrix::from_predictions(&labels, &preds, classes)?;
        let got = crate::metrics::metrics(&cm)?;
        let (want, acc) = naive_metrics(&labels, &preds, classes);
        let mut e = (got.accuracy - acc).abs();
        for (c, (p, r, f)) in got.per_class.iter().zip(want) {
            e = e.max((c.precision - p).abs()).max((c.recall - r).abs()).max((c.f1 - f).abs());
        }
        note(5, e);
    }
    Ok(worst)
}
