//! The channel-spatial attention vision transformer.
//!
//! Each encoder block is
//!
//! ```text
//! H' = LN(CBA(x) + x)                      channel (cross-covariance) attention
//! S  = LN(H' + conv(relu(bn(conv(H')))))   spatial interaction, depthwise 3x3
//! F  = LN(S + fc2(relu(fc1(S))))           MLP
//! ```
//!
//! Images are processed in batches: token matrices stack the tokens of every
//! image, `[batch * tokens_per_image, d]`. Cross-covariance attention and the
//! spatial convolutions act per image; batch norm pools statistics over the
//! whole batch.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{BatchNormMode, Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvtConfig {
    /// Nominal square input size in pixels. Other multiples of
    /// `patch_size` are accepted at run time.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Prepend the class token only before the last block (otherwise before
    /// the first).
    pub class_token_last: bool,
}

impl CsvtConfig {
    /// Reference configuration: patch 8, 12 layers, width 384, 4 heads.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 8,
            embed_dim: 384,
            num_layers: 12,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            class_token_last: true,
        }
    }

    /// Laptop-scale configuration used by the test suites.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 4,
            num_classes: 4,
            class_token_last: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return bad("patch_size, embed_dim, num_layers and num_heads must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("mlp_ratio and num_classes must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Patch grid `(rows, cols)` for an `h × w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return dim_err(
                "patch_embed",
                format!("image {h}x{w} is not a positive multiple of patch size {p}"),
            );
        }
        Ok((h / p, w / p))
    }
}

/// Which statistics the spatial block's batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, reported for running-average updates.
    Train,
    /// Batch statistics without running-average updates.
    BatchStats,
    /// Stored running statistics.
    Eval,
}

/// Recorded outputs of a forward pass.
pub struct Forward {
    /// Final class-token embeddings, `[batch, d]`.
    pub cls: Var,
    /// Last block output including class tokens, `[batch * (n + 1), d]`.
    pub tokens: Var,
    pub batch: usize,
    pub grid: (usize, usize),
    /// Per-block batch statistics in [`Mode::Train`].
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct CsvtModel<T> {
    pub config: CsvtConfig,
    pub params: ParamSet<T>,
    /// Batch-norm running statistics (not trained).
    pub buffers: ParamSet<T>,
}

pub fn block_name(i: usize, suffix: &str) -> String {
    format!("block{i}.{suffix}")
}

impl<T: Scalar> CsvtModel<T> {
    pub fn new<R: Rng + ?Sized>(config: CsvtConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = config.mlp_ratio * d;
        let mut p = ParamSet::new();
        let mut buffers = ParamSet::new();
        let w = |shape: Vec<usize>, rng: &mut R| Tensor::trunc_normal(shape, INIT_STD, rng);

        p.insert("patch_embed.weight", w(vec![config.patch_dim(), d], rng));
        p.insert("patch_embed.bias", Tensor::zeros(vec![d]));
        for i in 0..config.num_layers {
            let mut put = |s: &str, t: Tensor<T>| p.insert(block_name(i, s), t);
            for proj in ["q", "k", "v", "out"] {
                put(&format!("w{proj}"), w(vec![d, d], rng));
                put(&format!("b{proj}"), Tensor::zeros(vec![d]));
            }
            put("log_tau", Tensor::zeros(vec![config.num_heads]));
            put("ln1.gamma", Tensor::ones(vec![d]));
            put("ln1.beta", Tensor::zeros(vec![d]));
            put("sib.conv1", w(vec![3, 3, d], rng));
            put("sib.bn.gamma", Tensor::ones(vec![d]));
            put("sib.bn.beta", Tensor::zeros(vec![d]));
            put("sib.conv2", w(vec![3, 3, d], rng));
            put("sib.conv2_bias", Tensor::zeros(vec![d]));
            put("ln2.gamma", Tensor::ones(vec![d]));
            put("ln2.beta", Tensor::zeros(vec![d]));
            put("mlp.fc1.weight", w(vec![d, hidden], rng));
            put("mlp.fc1.bias", Tensor::zeros(vec![hidden]));
            put("mlp.fc2.weight", w(vec![hidden, d], rng));
            put("mlp.fc2.bias", Tensor::zeros(vec![d]));
            put("ln3.gamma", Tensor::ones(vec![d]));
            put("ln3.beta", Tensor::zeros(vec![d]));
            buffers.insert(block_name(i, "sib.bn.running_mean"), Tensor::zeros(vec![d]));
            buffers.insert(block_name(i, "sib.bn.running_var"), Tensor::ones(vec![d]));
        }
        p.insert("cls_token", w(vec![d], rng));
        p.insert("head.weight", w(vec![d, config.num_classes], rng));
        p.insert("head.bias", Tensor::zeros(vec![config.num_classes]));
        Ok(Self {
            config,
            params: p,
            buffers,
        })
    }

    /// Adds the self-distillation projection head: two GELU hidden layers, an
    /// L2-normalized bottleneck and a column-normalized output layer.
    pub fn add_projection_head<R: Rng + ?Sized>(
        &mut self,
        hidden: usize,
        bottleneck: usize,
        out_dim: usize,
        rng: &mut R,
    ) {
        let d = self.config.embed_dim;
        let p = &mut self.params;
        p.insert("proj.fc1.weight", Tensor::trunc_normal(vec![d, hidden], INIT_STD, rng));
        p.insert("proj.fc1.bias", Tensor::zeros(vec![hidden]));
        p.insert("proj.fc2.weight", Tensor::trunc_normal(vec![hidden, hidden], INIT_STD, rng));
        p.insert("proj.fc2.bias", Tensor::zeros(vec![hidden]));
        p.insert("proj.fc3.weight", Tensor::trunc_normal(vec![hidden, bottleneck], INIT_STD, rng));
        p.insert("proj.fc3.bias", Tensor::zeros(vec![bottleneck]));
        p.insert("proj.last.weight", Tensor::trunc_normal(vec![bottleneck, out_dim], INIT_STD, rng));
    }

    pub fn has_projection_head(&self) -> bool {
        self.params.contains("proj.last.weight")
    }

    /// Number of trainable scalars, optionally restricted by name.
    pub fn param_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Flattens images into patch rows, `[batch * n, 3p²]`, patches in
    /// row-major grid order and pixels `(row, col, channel)` within a patch.
    pub fn patchify(&self, images: &[Tensor<T>]) -> Result<(Tensor<T>, (usize, usize))> {
        let Some(first) = images.first() else {
            return dim_err("patch_embed", "empty batch");
        };
        let [h, w, 3] = first.shape()[..] else {
            return dim_err("patch_embed", format!("expected [h,w,3], got {:?}", first.shape()));
        };
        let (gh, gw) = self.config.grid(h, w)?;
        let p = self.config.patch_size;
        let pd = self.config.patch_dim();
        let mut rows = Vec::with_capacity(images.len() * gh * gw * pd);
        for img in images {
            if img.shape() != first.shape() {
                return dim_err("patch_embed", "images in a batch differ in size");
            }
            let src = img.data();
            for gi in 0..gh {
                for gj in 0..gw {
                    for pi in 0..p {
                        let start = ((gi * p + pi) * w + gj * p) * 3;
                        rows.extend_from_slice(&src[start..start + p * 3]);
                    }
                }
            }
        }
        Ok((Tensor::new(vec![images.len() * gh * gw, pd], rows)?, (gh, gw)))
    }

    /// Linear patch projection, `[batch * n, d]`. No positional embedding.
    pub fn patch_embed(&self, tape: &mut Tape<T>, bound: &Bound, images: &[Tensor<T>]) -> Result<(Var, (usize, usize))> {
        let (patches, grid) = self.patchify(images)?;
        let x = tape.constant(patches);
        let w = self.params.var(bound, "patch_embed.weight");
        let b = self.params.var(bound, "patch_embed.bias");
        let y = tape.matmul(x, w)?;
        Ok((tape.add_row(y, b)?, grid))
    }

    fn linear(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.params.var(bound, w))?;
        tape.add_row(y, self.params.var(bound, b))
    }

    /// Cross-covariance attention with residual and layer norm:
    /// `LN(x + W_out · concat_h(V_h · softmax(K̂_hᵀ Q̂_h / τ_h)ᵀ))`, computed per
    /// image over `tokens` rows each.
    pub fn cba_forward(&self, tape: &mut Tape<T>, bound: &Bound, block: usize, x: Var, tokens: usize) -> Result<Var> {
        let total = tape.value(x).dims2()?.0;
        if tokens == 0 || total % tokens != 0 {
            return dim_err("cba", format!("{total} rows do not split into images of {tokens} tokens"));
        }
        let batch = total / tokens;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let name = |s: &str| block_name(block, s);
        let q = self.linear(tape, bound, x, &name("wq"), &name("bq"))?;
        let k = self.linear(tape, bound, x, &name("wk"), &name("bk"))?;
        let v = self.linear(tape, bound, x, &name("wv"), &name("bv"))?;
        let log_tau = self.params.var(bound, &name("log_tau"));
        let log_tau = tape.reshape(log_tau, &[1, heads])?;

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let lt = tape.slice_cols(log_tau, h, 1)?;
            let neg = tape.scale(lt, -T::one())?;
            let inv_tau = tape.exp(neg)?;
            let mut per_image = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = tape.slice_rows(qh, b * tokens, tokens)?;
                let kb = tape.slice_rows(kh, b * tokens, tokens)?;
                let vb = tape.slice_rows(vh, b * tokens, tokens)?;
                let attn = self.xca_attention(tape, qb, kb, inv_tau)?;
                let at = tape.transpose(attn)?;
                per_image.push(tape.matmul(vb, at)?);
            }
            head_outs.push(if batch == 1 { per_image[0] } else { tape.concat_rows(&per_image)? });
        }
        let cat = if heads == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
        let proj = self.linear(tape, bound, cat, &name("wout"), &name("bout"))?;
        let res = tape.add(proj, x)?;
        tape.layer_norm(
            res,
            self.params.var(bound, &name("ln1.gamma")),
            self.params.var(bound, &name("ln1.beta")),
        )
    }

    /// `softmax_rows(K̂ᵀ Q̂ · inv_tau)` for one image and head, `[dh, dh]`.
    pub fn xca_attention(&self, tape: &mut Tape<T>, q: Var, k: Var, inv_tau: Var) -> Result<Var> {
        let qn = tape.l2_normalize_cols(q)?;
        let kn = tape.l2_normalize_cols(k)?;
        let knt = tape.transpose(kn)?;
        let cross = tape.matmul(knt, qn)?;
        let scaled = tape.mul_scalar(cross, inv_tau)?;
        tape.softmax_rows(scaled)
    }

    /// Spatial interaction: `LN(x + conv2(relu(bn(conv1(x)))))` on the patch
    /// grid. With `has_cls`, the first row of every image is a class token
    /// that bypasses the block unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn sib_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        buffers: &ParamSet<T>,
        block: usize,
        x: Var,
        grid: (usize, usize),
        has_cls: bool,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (total, d) = tape.value(x).dims2()?;
        let n = grid.0 * grid.1;
        let per_image = n + usize::from(has_cls);
        if n == 0 || total % per_image != 0 {
            return dim_err(
                "sib",
                format!("{total} rows do not match a {}x{} grid{}", grid.0, grid.1, if has_cls { " plus class token" } else { "" }),
            );
        }
        let batch = total / per_image;
        let name = |s: &str| block_name(block, s);
        let mut cls_rows = Vec::new();
        let spatial = if has_cls {
            let mut parts = Vec::with_capacity(batch);
            for b in 0..batch {
                cls_rows.push(tape.slice_rows(x, b * per_image, 1)?);
                parts.push(tape.slice_rows(x, b * per_image + 1, n)?);
            }
            if batch == 1 { parts[0] } else { tape.concat_rows(&parts)? }
        } else {
            x
        };

        let img = tape.reshape(spatial, &[batch, grid.0, grid.1, d])?;
        let c1 = tape.depthwise_conv3x3(img, self.params.var(bound, &name("sib.conv1")))?;
        let c1 = tape.reshape(c1, &[batch * n, d])?;
        let (running_mean, running_var);
        let bn_mode = match mode {
            Mode::Eval => {
                running_mean = buffers.expect(&name("sib.bn.running_mean")).data().to_vec();
                running_var = buffers.expect(&name("sib.bn.running_var")).data().to_vec();
                BatchNormMode::Running {
                    mean: &running_mean,
                    var: &running_var,
                }
            }
            Mode::Train | Mode::BatchStats => BatchNormMode::Batch,
        };
        let (bn, stats) = tape.batch_norm(
            c1,
            self.params.var(bound, &name("sib.bn.gamma")),
            self.params.var(bound, &name("sib.bn.beta")),
            bn_mode,
        )?;
        let act = tape.relu(bn)?;
        let act = tape.reshape(act, &[batch, grid.0, grid.1, d])?;
        let c2 = tape.depthwise_conv3x3(act, self.params.var(bound, &name("sib.conv2")))?;
        let c2 = tape.reshape(c2, &[batch * n, d])?;
        let c2 = tape.add_row(c2, self.params.var(bound, &name("sib.conv2_bias")))?;
        let res = tape.add(spatial, c2)?;
        let out = tape.layer_norm(
            res,
            self.params.var(bound, &name("ln2.gamma")),
            self.params.var(bound, &name("ln2.beta")),
        )?;

        let out = if has_cls {
            let mut parts = Vec::with_capacity(2 * batch);
            for (b, &cls) in cls_rows.iter().enumerate() {
                parts.push(cls);
                parts.push(tape.slice_rows(out, b * n, n)?);
            }
            tape.concat_rows(&parts)?
        } else {
            out
        };
        let stats = if mode == Mode::Train { stats } else { None };
        Ok((out, stats))
    }

    /// `LN(s + fc2(relu(fc1(s))))`.
    pub fn mlp_forward(&self, tape: &mut Tape<T>, bound: &Bound, block: usize, s: Var) -> Result<Var> {
        let name = |x: &str| block_name(block, x);
        let h = self.linear(tape, bound, s, &name("mlp.fc1.weight"), &name("mlp.fc1.bias"))?;
        let h = tape.relu(h)?;
        let o = self.linear(tape, bound, h, &name("mlp.fc2.weight"), &name("mlp.fc2.bias"))?;
        let res = tape.add(s, o)?;
        tape.layer_norm(
            res,
            self.params.var(bound, &name("ln3.gamma")),
            self.params.var(bound, &name("ln3.beta")),
        )
    }

    fn prepend_cls(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, batch: usize, n: usize) -> Result<Var> {
        let cls = self.params.var(bound, "cls_token");
        let cls = tape.reshape(cls, &[1, self.config.embed_dim])?;
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(cls);
            parts.push(tape.slice_rows(x, b * n, n)?);
        }
        tape.concat_rows(&parts)
    }

    /// Runs the encoder on a batch of equally sized `[h,w,3]` images.
    pub fn forward_features(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &[Tensor<T>],
        mode: Mode,
    ) -> Result<Forward> {
        let batch = images.len();
        let (mut x, grid) = self.patch_embed(tape, bound, images)?;
        let n = grid.0 * grid.1;
        let layers = self.config.num_layers;
        let cls_at = if self.config.class_token_last { layers - 1 } else { 0 };
        let mut has_cls = false;
        let mut bn_stats = Vec::new();
        for i in 0..layers {
            if i == cls_at {
                x = self.prepend_cls(tape, bound, x, batch, n)?;
                has_cls = true;
            }
            let per_image = n + usize::from(has_cls);
            let h = self.cba_forward(tape, bound, i, x, per_image)?;
            let (s, stats) = self.sib_forward(tape, bound, &self.buffers, i, h, grid, has_cls, mode)?;
            if let Some((m, v)) = stats {
                let to64 = |xs: Vec<T>| xs.into_iter().map(|t| t.to_f64().unwrap()).collect();
                bn_stats.push((i, to64(m), to64(v)));
            }
            x = self.mlp_forward(tape, bound, i, s)?;
        }
        let per_image = n + 1;
        let cls_rows: Vec<Var> = (0..batch)
            .map(|b| tape.slice_rows(x, b * per_image, 1))
            .collect::<Result<_>>()?;
        let cls = if batch == 1 { cls_rows[0] } else { tape.concat_rows(&cls_rows)? };
        Ok(Forward {
            cls,
            tokens: x,
            batch,
            grid,
            bn_stats,
        })
    }

    /// Classification logits, `[batch, num_classes]`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(Var, Forward)> {
        let f = self.forward_features(tape, bound, images, mode)?;
        let logits = self.linear(tape, bound, f.cls, "head.weight", "head.bias")?;
        Ok((logits, f))
    }

    /// Mean of each image's last-block tokens (class token included),
    /// `[batch, d]`.
    pub fn pooled(&self, tape: &mut Tape<T>, f: &Forward) -> Result<Var> {
        let rows = tape.value(f.tokens).dims2()?.0;
        tape.group_mean(f.tokens, rows / f.batch)
    }

    /// Projection-head outputs, `[batch, out_dim]`, for `[batch, d]` embeddings.
    pub fn forward_projection(&self, tape: &mut Tape<T>, bound: &Bound, emb: Var) -> Result<Var> {
        if !self.has_projection_head() {
            return Err(Error::Config("model has no projection head".into()));
        }
        let h = self.linear(tape, bound, emb, "proj.fc1.weight", "proj.fc1.bias")?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, bound, h, "proj.fc2.weight", "proj.fc2.bias")?;
        let h = tape.gelu(h)?;
        let z = self.linear(tape, bound, h, "proj.fc3.weight", "proj.fc3.bias")?;
        let z = tape.l2_normalize_rows(z)?;
        let w = tape.l2_normalize_cols(self.params.var(bound, "proj.last.weight"))?;
        tape.matmul(z, w)
    }

    /// Blends batch statistics from a [`Mode::Train`] pass into the running
    /// averages (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<f64>, Vec<f64>)], rows: usize) {
        let m = BN_MOMENTUM;
        let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
        for (block, mean, var) in stats {
            let rm = self.buffers.get_mut(&block_name(*block, "sib.bn.running_mean")).unwrap();
            for (r, &v) in rm.data_mut().iter_mut().zip(mean) {
                *r = T::lit((1.0 - m) * r.to_f64().unwrap() + m * v);
            }
            let rv = self.buffers.get_mut(&block_name(*block, "sib.bn.running_var")).unwrap();
            for (r, &v) in rv.data_mut().iter_mut().zip(var) {
                *r = T::lit((1.0 - m) * r.to_f64().unwrap() + m * v * unbias);
            }
        }
    }

    /// Inference logits for a batch of images, `[batch, num_classes]`.
    pub fn predict_logits(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (logits, _) = self.forward_logits(&mut tape, &bound, images, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.params.to_checkpoint("", &mut ckpt)?;
        self.buffers.to_checkpoint("", &mut ckpt)?;
        Ok(ckpt)
    }

    /// Loads every parameter and buffer; shapes must match exactly.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.params.load_from(ckpt, "", |_| false)?;
        self.buffers.load_from(ckpt, "", |_| false)
    }

    /// Loads the encoder only, leaving the classifier and projection heads.
    pub fn load_backbone(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let skip = |n: &str| n.starts_with("head.") || n.starts_with("proj.");
        self.params.load_from(ckpt, "", skip)?;
        self.buffers.load_from(ckpt, "", |_| false)
    }

    /// Recovers the architecture from tensor shapes in a checkpoint.
    pub fn config_from_checkpoint(ckpt: &Checkpoint, image_size: usize) -> Result<CsvtConfig> {
        let get = |n: &str| {
            ckpt.get(n)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {n}")))
        };
        let pe = get("patch_embed.weight")?;
        let [pd, d] = pe.shape()[..] else {
            return Err(Error::Checkpoint("patch_embed.weight must be rank 2".into()));
        };
        let p = ((pd / 3) as f64).sqrt().round() as usize;
        if 3 * p * p != pd {
            return Err(Error::Checkpoint(format!("patch_embed.weight has {pd} rows, not 3p²")));
        }
        let mut layers = 0;
        while ckpt.get(&block_name(layers, "wq")).is_some() {
            layers += 1;
        }
        let heads = get(&block_name(0, "log_tau"))?.numel();
        let hidden = get(&block_name(0, "mlp.fc1.bias"))?.numel();
        let classes = get("head.bias")?.numel();
        let config = CsvtConfig {
            image_size,
            patch_size: p,
            embed_dim: d,
            num_layers: layers,
            num_heads: heads,
            mlp_ratio: hidden / d.max(1),
            num_classes: classes,
            class_token_last: true,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{naive_cba, naive_sib};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CsvtConfig {
        CsvtConfig {
            image_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ..CsvtConfig::desk()
        }
    }

    fn model(cfg: CsvtConfig, seed: u64) -> CsvtModel<f64> {
        CsvtModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn images(count: usize, size: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Tensor::uniform(vec![size, size, 3], 0.0, 1.0, &mut rng)).collect()
    }

    /// Closed-form trainable parameter count.
    fn expected_params(c: &CsvtConfig) -> usize {
        let (d, k, hid) = (c.embed_dim, c.num_classes, c.mlp_ratio * c.embed_dim);
        let block = 4 * (d * d + d) + c.num_heads + 3 * 2 * d + 2 * 9 * d + 2 * d + d + (d * hid + hid) + (hid * d + d);
        c.patch_dim() * d + d + c.num_layers * block + d + d * k + k
    }

    #[test]
    fn output_shapes() {
        let m = model(small(), 0);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let (logits, f) = m.forward_logits(&mut tape, &bound, &images(3, 16, 1), Mode::Eval).unwrap();
        assert_eq!(tape.value(logits).shape(), [3, 4]);
        assert_eq!(tape.value(f.tokens).shape(), [3 * 5, 8]);
        assert_eq!(tape.value(f.cls).shape(), [3, 8]);
        assert_eq!(f.grid, (2, 2));
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let mut m = model(small(), 0);
        m.params.insert("patch_embed.bias", Tensor::from_fn(vec![8], |i| i as f64));
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let (x, _) = m.patch_embed(&mut tape, &bound, &[Tensor::zeros(vec![16, 16, 3])]).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(x).row(r), m.params.expect("patch_embed.bias").data());
        }
    }

    #[test]
    fn zero_values_reduce_cba_to_bias_residual() {
        let mut m = model(small(), 2);
        m.params.insert(block_name(0, "wv"), Tensor::zeros(vec![8, 8]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bout = Tensor::randn(vec![8], 1.0, &mut rng);
        m.params.insert(block_name(0, "bout"), bout.clone());
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = m.cba_forward(&mut tape, &bound, 0, xv, 6).unwrap();
        let shifted = crate::ops::add_row(&x, &bout).unwrap();
        let ones = Tensor::ones(vec![8]);
        let want = crate::ops::layer_norm(&shifted, &ones, &Tensor::zeros(vec![8]), crate::ops::LN_EPS).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_queries_and_keys_give_uniform_attention() {
        let m = model(small(), 0);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![5, 4]));
        let k = tape.constant(Tensor::zeros(vec![5, 4]));
        let inv_tau = tape.constant(Tensor::full(vec![1, 1], 1.0));
        let a = m.xca_attention(&mut tape, q, k, inv_tau).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn cba_matches_reference() {
        let m = model(small(), 4);
        let x = Tensor::randn(vec![7, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = m.cba_forward(&mut tape, &bound, 1, xv, 7).unwrap();
        assert!(tape.value(y).max_abs_diff(&naive_cba(&m, 1, &x)).unwrap() < 1e-12);
    }

    #[test]
    fn sib_matches_reference_with_class_token_bypass() {
        let m = model(small(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let patches = Tensor::randn(vec![2 * 6, 8], 1.0, &mut rng);
        let cls = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        let mut rows = Vec::new();
        for b in 0..2 {
            rows.extend_from_slice(cls.data());
            rows.extend_from_slice(&patches.data()[b * 48..(b + 1) * 48]);
        }
        let x = Tensor::new(vec![14, 8], rows).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (y, _) = m.sib_forward(&mut tape, &bound, &m.buffers, 0, xv, (2, 3), true, Mode::BatchStats).unwrap();
        let want = naive_sib(&m, 0, &patches, (2, 3));
        let y = tape.value(y);
        for b in 0..2 {
            assert_eq!(y.row(b * 7), cls.data());
            for t in 0..6 {
                for (u, v) in y.row(b * 7 + 1 + t).iter().zip(want.row(b * 6 + t)) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_order_matters_for_the_full_model() {
        let m = model(small(), 8);
        let img = images(1, 16, 9).remove(0);
        // swap the top-left and bottom-right 8x8 patches
        let mut swapped = img.clone();
        for i in 0..8 {
            for j in 0..8 {
                for c in 0..3 {
                    let a = (i * 16 + j) * 3 + c;
                    let b = ((i + 8) * 16 + j + 8) * 3 + c;
                    swapped.data_mut()[a] = img.data()[b];
                    swapped.data_mut()[b] = img.data()[a];
                }
            }
        }
        let a = m.predict_logits(&[img]).unwrap();
        let b = m.predict_logits(&[swapped]).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-9);
    }

    #[test]
    fn shared_weights_accept_other_sizes() {
        let m = model(CsvtConfig::desk(), 10);
        for size in [224, 96] {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, false);
            let (logits, f) = m.forward_logits(&mut tape, &bound, &images(1, size, 11), Mode::Eval).unwrap();
            assert_eq!(f.grid.0 * f.grid.1, (size / 8) * (size / 8));
            assert!(tape.value(logits).all_finite());
        }
        assert!(m.predict_logits(&images(1, 20, 0)).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        for cfg in [small(), CsvtConfig::desk(), CsvtConfig::paper()] {
            let m = CsvtModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.param_count(|_| true), expected_params(&cfg));
        }
        let mut m = model(small(), 0);
        m.add_projection_head(16, 4, 10, &mut ChaCha8Rng::seed_from_u64(0));
        let head = 8 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4 + 4 * 10;
        assert_eq!(m.param_count(|n| n.starts_with("proj.")), head);
    }

    #[test]
    fn checkpoint_round_trip_and_config_recovery() {
        let m = model(small(), 12);
        let ckpt = m.to_checkpoint().unwrap();
        assert_eq!(CsvtModel::<f64>::config_from_checkpoint(&ckpt, 16).unwrap(), small());
        let mut other = model(small(), 13);
        other.load_checkpoint(&ckpt).unwrap();
        assert_eq!(other.to_checkpoint().unwrap(), ckpt);
        // checkpoints hold f32, so f64 weights round to single precision
        let imgs = images(2, 16, 14);
        let diff = m.predict_logits(&imgs).unwrap().max_abs_diff(&other.predict_logits(&imgs).unwrap());
        assert!(diff.unwrap() < 1e-5);
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let mut m = model(small(), 0);
        m.update_running_stats(&[(1, vec![2.0; 8], vec![3.0; 8])], 4);
        let mean = m.buffers.expect(&block_name(1, "sib.bn.running_mean"));
        let var = m.buffers.expect(&block_name(1, "sib.bn.running_var"));
        assert!((mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((var.data()[0] - (0.9 + 0.1 * 3.0 * 4.0 / 3.0)).abs() < 1e-12);
    }
}
