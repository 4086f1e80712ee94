//! Dynamic reverse-mode tape.
//!
//! Each forward op appends a node holding its output value and the ids of its
//! inputs. Inputs always precede the op that consumes them, so `backward`
//! is a single reverse sweep over the node list.

use crate::error::{dim_err, Error, Result};
use crate::ops::{self, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where batch normalization takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Statistics of the current batch (differentiated through).
    Batch,
    /// Fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        batch: bool,
    },
    DwConv(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        rows: bool,
    },
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GroupMean(Var, usize),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::DwConv(..) => "depthwise_conv3x3",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Reshape(..) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GroupMean(..) => "group_mean",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    macs: u64,
}

/// One executed op as seen by the shape-trace: its kind, output shape and
/// multiply-accumulate count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub macs: u64,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf whose gradient `backward` populates.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            macs: 0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| TraceEntry {
                op: n.op.name(),
                shape: n.value.shape().to_vec(),
                macs: n.macs,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], macs: u64) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            macs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        self.push(out, Op::MatMul(a, b), &[a, b], (m * k * n) as u64)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        self.push(out, Op::Transpose(a), &[a], 0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b], 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_with("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], 0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul(a, b), &[a, b], 0)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = ops::scale(self.value(a), s);
        self.push(out, Op::Scale(a, s), &[a], 0)
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = ops::add_row(self.value(a), self.value(row))?;
        self.push(out, Op::AddRow(a, row), &[a, row], 0)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = ops::scale(self.value(a), sv);
        self.push(out, Op::MulScalar(a, s), &[a, s], 0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        self.push(out, Op::Exp(a), &[a], 0)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::ln);
        self.push(out, Op::Log(a), &[a], 0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = ops::relu(self.value(a));
        self.push(out, Op::Relu(a), &[a], 0)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = ops::gelu(self.value(a));
        self.push(out, Op::Gelu(a), &[a], 0)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        self.push(out, Op::SoftmaxRows(a), &[a], 0)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::log_softmax_rows(self.value(a))?;
        self.push(out, Op::LogSoftmaxRows(a), &[a], 0)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, stats) =
            ops::layer_norm_fwd(self.value(x), self.value(gamma), self.value(beta), ops::LN_EPS)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
            0,
        )
    }

    /// Batch normalization over the rows of `x`. In [`BatchNormMode::Batch`]
    /// the batch mean and biased variance are returned for running-stat
    /// updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (moments, batch) = match mode {
            BatchNormMode::Batch => (ops::column_moments(self.value(x))?, true),
            BatchNormMode::Running { mean, var } => ((mean.to_vec(), var.to_vec()), false),
        };
        let (out, stats) = ops::batch_norm_fwd(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &moments.0,
            &moments.1,
            ops::BN_EPS,
        )?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch,
            },
            &[x, gamma, beta],
            0,
        )?;
        Ok((v, batch.then_some(moments)))
    }

    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::depthwise_conv3x3(self.value(x), self.value(kernel))?;
        let macs = 9 * out.numel() as u64;
        self.push(out, Op::DwConv(x, kernel), &[x, kernel], macs)
    }

    pub fn l2_normalize_cols(&mut self, x: Var) -> Result<Var> {
        self.l2_normalize(x, false)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.l2_normalize(x, true)
    }

    fn l2_normalize(&mut self, x: Var, rows: bool) -> Result<Var> {
        let (out, norms) = ops::l2_normalize_fwd(self.value(x), ops::L2_EPS, rows)?;
        self.push(out, Op::L2Normalize { x, norms, rows }, &[x], 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x], 0)
    }

    /// Columns `start..start + len` of a rank-2 value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        if start + len > c {
            return dim_err("slice_cols", format!("{start}+{len} exceeds {c} columns"));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        self.push(out, Op::SliceCols(x, start), &[x], 0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols", "nothing to concatenate");
        };
        let r = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return dim_err("concat_cols", format!("row counts {r} vs {pr}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, 0)
    }

    /// Rows `start..start + len` of a rank-2 value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        if start + len > r {
            return dim_err("slice_rows", format!("{start}+{len} exceeds {r} rows"));
        }
        let out = Tensor::new(vec![len, c], src.data()[start * c..(start + len) * c].to_vec())?;
        self.push(out, Op::SliceRows(x, start), &[x], 0)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows", "nothing to concatenate");
        };
        let c = self.value(first).dims2()?.1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return dim_err("concat_rows", format!("column counts {c} vs {pc}"));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], out)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, 0)
    }

    /// Mean of each run of `group` consecutive rows, `[r / group, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        if group == 0 || r % group != 0 {
            return dim_err("group_mean", format!("{r} rows do not split into groups of {group}"));
        }
        let inv = T::lit(1.0 / group as f64);
        let mut out = vec![T::zero(); (r / group) * c];
        for i in 0..r {
            let dst = (i / group) * c;
            for (o, &v) in out[dst..dst + c].iter_mut().zip(&src.data()[i * c..(i + 1) * c]) {
                *o += v * inv;
            }
        }
        let out = Tensor::new(vec![r / group, c], out)?;
        self.push(out, Op::GroupMean(x, group), &[x], 0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x], 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x], 0)
    }

    /// Populates gradients of the scalar `loss` for every node that depends on
    /// a [`Tape::param`] leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already computed; reset before a second backward"));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss does not depend on any trainable leaf"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            grads[idx] = Some(g);
            for (v, d) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if needs(*a) {
                    res.push((*a, ops::matmul_ex(g, false, val(*b), true)?));
                }
                if needs(*b) {
                    res.push((*b, ops::matmul_ex(val(*a), true, g, false)?));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, ops::transpose(g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, ops::mul(g, val(*b))?), (*b, ops::mul(g, val(*a))?)],
            Op::Scale(a, s) => vec![(*a, ops::scale(g, *s))],
            Op::AddRow(a, row) => {
                let (r, c) = g.dims2()?;
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    for (d, &v) in db.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                let db = Tensor::new(val(*row).shape().to_vec(), db)?;
                vec![(*a, g.clone()), (*row, db)]
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item()?;
                let ds = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                let ds = Tensor::new(val(*s).shape().to_vec(), vec![ds])?;
                vec![(*a, ops::scale(g, sv)), (*s, ds)]
            }
            Op::Exp(a) => vec![(*a, ops::mul(g, out)?)],
            Op::Log(a) => vec![(*a, ops::zip_with("log", g, val(*a), |d, x| d / x)?)],
            Op::Relu(a) => vec![(
                *a,
                ops::zip_with("relu", g, val(*a), |d, x| if x > T::zero() { d } else { T::zero() })?,
            )],
            Op::Gelu(a) => vec![(
                *a,
                ops::zip_with("gelu", g, val(*a), |d, x| d * ops::gelu_grad_scalar(x))?,
            )],
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let (y, dy) = (out.row(i), g.row(i));
                    let dot: T = y.iter().zip(dy).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (dy[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], dx)?)]
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let (y, dy) = (out.row(i), g.row(i));
                    let total: T = dy.iter().copied().sum();
                    for j in 0..c {
                        dx[i * c + j] = dy[j] - y[j].exp() * total;
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], dx)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) = ops::layer_norm_bwd(val(*x), val(*gamma), stats, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch,
            } => {
                let (dx, dg, db) = ops::batch_norm_bwd(val(*x), val(*gamma), stats, g, *batch);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::DwConv(x, k) => {
                let (dx, dk) = ops::depthwise_conv3x3_bwd(val(*x), val(*k), g);
                vec![(*x, dx), (*k, dk)]
            }
            Op::L2Normalize { x, norms, rows } => {
                vec![(*x, ops::l2_normalize_bwd(out, norms, ops::L2_EPS, g, *rows))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2()?;
                let len = g.dims2()?.1;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                vec![(*a, Tensor::new(vec![r, c], dx)?)]
            }
            Op::ConcatCols(parts) => {
                let r = g.dims2()?.0;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = val(p).dims2()?.1;
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    res.push((p, Tensor::new(vec![r, pc], dp)?));
                    offset += pc;
                }
                res
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).dims2()?;
                let mut dx = vec![T::zero(); r * c];
                dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(vec![r, c], dx)?)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).numel();
                    let dp = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    res.push((p, dp));
                    offset += n;
                }
                res
            }
            Op::GroupMean(a, group) => {
                let (r, c) = val(*a).dims2()?;
                let inv = T::lit(1.0 / *group as f64);
                let d = Tensor::from_fn(vec![r, c], |i| g.data()[(i / c / group) * c + i % c] * inv);
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()?))],
            Op::Mean(a) => {
                let n = T::from_usize(val(*a).numel()).unwrap();
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()? / n))]
            }
        })
    }
}
