//! Analytic cost models and wall-clock scaling of cross-covariance attention
//! against quadratic token self-attention.
//!
//! Counts are multiply-accumulates (MACs) unless named `flops`; one MAC is two
//! FLOPs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CsvtConfig, CsvtModel, Mode};
use crate::ops::{self, L2_EPS};
use crate::tape::{Tape, TraceEntry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Channel (cross-covariance) attention, `d/h × d/h` per head.
    Cba,
    /// Token self-attention, `n × n` per head.
    SelfAttention,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Cba => "cba",
            Variant::SelfAttention => "self_attention",
        }
    }
}

/// FLOPs of one attention stage on `n` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageFlops {
    /// The attention products only: `K̂ᵀQ̂` and `V·Aᵀ` (channel) or `QKᵀ`
    /// and `A·V` (token).
    pub attention: u64,
    /// Q, K, V and output projections.
    pub projections: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.projections
    }
}

/// Channel: `h · (2n(d/h)² + 2n(d/h)²)`. Token: `h · 2 · 2n²(d/h)`.
/// Projections: `4 · 2nd²` for both.
pub fn flop_count(variant: Variant, n: u64, d: u64, h: u64) -> StageFlops {
    let dh = d / h;
    let attention = match variant {
        Variant::Cba => h * (2 * n * dh * dh + 2 * n * dh * dh),
        Variant::SelfAttention => h * (2 * n * n * dh * 2),
    };
    StageFlops {
        attention,
        projections: 4 * 2 * n * d * d,
    }
}

/// Attention-matrix elements held per forward: `batch · h · (d/h)²` or
/// `batch · h · n²`.
pub fn memory_model(variant: Variant, n: u64, d: u64, h: u64, batch: u64) -> u64 {
    let dh = d / h;
    match variant {
        Variant::Cba => batch * h * dh * dh,
        Variant::SelfAttention => batch * h * n * n,
    }
}

/// Closed-form MACs of one forward pass, counting matrix products and
/// convolutions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelMacs {
    pub patch_embed: u64,
    pub projections: u64,
    pub attention: u64,
    pub spatial: u64,
    pub mlp: u64,
    pub head: u64,
}

impl ModelMacs {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.projections + self.attention + self.spatial + self.mlp + self.head
    }
}

pub fn model_macs(cfg: &CsvtConfig, height: usize, width: usize) -> Result<ModelMacs> {
    let (gh, gw) = cfg.grid(height, width)?;
    let n = (gh * gw) as u64;
    let d = cfg.embed_dim as u64;
    let h = cfg.num_heads as u64;
    let hidden = (cfg.mlp_ratio * cfg.embed_dim) as u64;
    let layers = cfg.num_layers;
    let cls_at = if cfg.class_token_last { layers - 1 } else { 0 };
    let mut m = ModelMacs {
        patch_embed: n * cfg.patch_dim() as u64 * d,
        projections: 0,
        attention: 0,
        spatial: 0,
        mlp: 0,
        head: d * cfg.num_classes as u64,
    };
    for i in 0..layers {
        let rows = n + u64::from(i >= cls_at);
        m.projections += 4 * rows * d * d;
        m.attention += flop_count(Variant::Cba, rows, d, h).attention / 2;
        m.spatial += 2 * 9 * n * d;
        m.mlp += 2 * rows * d * hidden;
    }
    Ok(m)
}

/// Shape trace of an executed single-image forward pass.
pub fn forward_trace(cfg: &CsvtConfig, height: usize, width: usize) -> Result<Vec<TraceEntry>> {
    let model = CsvtModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let image = Tensor::zeros(vec![height, width, 3]);
    model.forward_logits(&mut tape, &bound, &[image], Mode::Eval)?;
    Ok(tape.trace())
}

/// Least-squares slope of `ln y` against `ln x`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Input("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Input("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Inputs of one timed attention stage.
struct StageInputs {
    x: Tensor<f32>,
    wq: Tensor<f32>,
    wk: Tensor<f32>,
    wv: Tensor<f32>,
    wo: Tensor<f32>,
}

fn cols(x: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let (r, c) = x.dims2()?;
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
    }
    Tensor::new(vec![r, len], out)
}

/// One attention stage (projections, per-head attention, output projection)
/// with plain kernels.
fn attention_stage(variant: Variant, s: &StageInputs, heads: usize) -> Result<Tensor<f32>> {
    let q = ops::matmul(&s.x, &s.wq)?;
    let k = ops::matmul(&s.x, &s.wk)?;
    let v = ops::matmul(&s.x, &s.wv)?;
    let (n, d) = q.dims2()?;
    let dh = d / heads;
    let mut out = vec![0.0f32; n * d];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * dh, dh)?, cols(&k, h * dh, dh)?, cols(&v, h * dh, dh)?);
        let o = match variant {
            Variant::Cba => {
                let qn = ops::l2_normalize_cols(&qh, L2_EPS)?;
                let kn = ops::l2_normalize_cols(&kh, L2_EPS)?;
                let a = ops::softmax_rows(&ops::matmul_ex(&kn, true, &qn, false)?)?;
                ops::matmul_ex(&vh, false, &a, true)?
            }
            Variant::SelfAttention => {
                let scores = ops::scale(&ops::matmul_ex(&qh, false, &kh, true)?, 1.0 / (dh as f32).sqrt());
                ops::matmul(&ops::softmax_rows(&scores)?, &vh)?
            }
        };
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(o.row(i));
        }
    }
    ops::matmul(&Tensor::new(vec![n, d], out)?, &s.wo)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
}

impl Timing {
    pub fn cv(&self) -> f64 {
        self.std_ms / self.mean_ms
    }
}

const MIN_SAMPLE_SECS: f64 = 0.1;
const MAX_RERUNS: usize = 3;

/// Wall-clock time of one attention stage: warm-up, then `repeats` samples
/// each averaging enough iterations to last at least 100 ms. A measurement
/// with std/mean ≥ 0.25 is repeated up to three times.
pub fn time_stage(variant: Variant, n: usize, d: usize, heads: usize, repeats: usize, seed: u64) -> Result<Timing> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = |rng: &mut ChaCha8Rng| Tensor::randn(vec![d, d], 0.02, rng);
    let s = StageInputs {
        x: Tensor::randn(vec![n, d], 1.0, &mut rng),
        wq: w(&mut rng),
        wk: w(&mut rng),
        wv: w(&mut rng),
        wo: w(&mut rng),
    };
    let start = Instant::now();
    attention_stage(variant, &s, heads)?;
    let once = start.elapsed().as_secs_f64().max(1e-6);
    let iters = ((MIN_SAMPLE_SECS / once).ceil() as usize).max(1);
    let mut best: Option<Timing> = None;
    for _ in 0..MAX_RERUNS {
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            for _ in 0..iters {
                std::hint::black_box(attention_stage(variant, &s, heads)?);
            }
            samples.push(t.elapsed().as_secs_f64() * 1e3 / iters as f64);
        }
        let mean = samples.iter().sum::<f64>() / repeats as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats as f64 - 1.0).max(1.0);
        let timing = Timing {
            mean_ms: mean,
            std_ms: var.sqrt(),
            repeats,
        };
        let done = timing.cv() < 0.25;
        if best.as_ref().is_none_or(|b| timing.cv() < b.cv()) {
            best = Some(timing);
        }
        if done {
            break;
        }
    }
    Ok(best.expect("at least one timing run"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRecord {
    pub variant: Variant,
    pub input_size: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub flops: StageFlops,
    pub attention_elements: u64,
    pub timing: Option<Timing>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub records: Vec<ScalingRecord>,
    /// Fitted exponent of analytic attention FLOPs against `n`.
    pub analytic_slope: Vec<(Variant, f64)>,
    /// Fitted exponent of measured stage time against `n`, when timed.
    pub measured_slope: Vec<(Variant, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub repeats: usize,
    /// Largest attention matrix (elements per head) a timed run may allocate.
    pub element_budget: u64,
    pub timing: bool,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            sizes: vec![224, 336, 448, 560, 672],
            patch_size: 8,
            embed_dim: 64,
            heads: 2,
            repeats: 5,
            element_budget: 1 << 27,
            timing: true,
            seed: 0,
        }
    }
}

pub const SCALING_HEADER: &str = "variant,input_size,n,d,heads,attention_flops,stage_flops,attention_elements,mean_ms,std_ms";

pub fn run_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.sizes.len() < 4 {
        return Err(Error::Input("scaling fit needs at least four sizes".into()));
    }
    if cfg.repeats < 5 && cfg.timing {
        return Err(Error::Input("timing needs at least five repeats".into()));
    }
    if cfg.heads == 0 || !cfg.embed_dim.is_multiple_of(cfg.heads) {
        return Err(Error::Input("embed_dim must be divisible by heads".into()));
    }
    let mut records = Vec::new();
    for &size in &cfg.sizes {
        if size == 0 || size % cfg.patch_size != 0 {
            return Err(Error::Input(format!("size {size} is not a multiple of patch size {}", cfg.patch_size)));
        }
        let n = (size / cfg.patch_size).pow(2);
        if (n as u64).pow(2) > cfg.element_budget {
            return Err(Error::Input(format!(
                "size {size}: {n}x{n} attention matrix exceeds the element budget {}",
                cfg.element_budget
            )));
        }
        for variant in [Variant::Cba, Variant::SelfAttention] {
            let (nn, d, h) = (n as u64, cfg.embed_dim as u64, cfg.heads as u64);
            let timing = if cfg.timing {
                log::info!("timing {} at {size}px (n = {n})", variant.name());
                Some(time_stage(variant, n, cfg.embed_dim, cfg.heads, cfg.repeats, cfg.seed)?)
            } else {
                None
            };
            records.push(ScalingRecord {
                variant,
                input_size: size,
                n,
                d: cfg.embed_dim,
                heads: cfg.heads,
                flops: flop_count(variant, nn, d, h),
                attention_elements: memory_model(variant, nn, d, h, 1),
                timing,
            });
        }
    }
    let mut analytic_slope = Vec::new();
    let mut measured_slope = Vec::new();
    for variant in [Variant::Cba, Variant::SelfAttention] {
        let rs: Vec<&ScalingRecord> = records.iter().filter(|r| r.variant == variant).collect();
        let ns: Vec<f64> = rs.iter().map(|r| r.n as f64).collect();
        let flops: Vec<f64> = rs.iter().map(|r| r.flops.attention as f64).collect();
        analytic_slope.push((variant, fit_slope(&ns, &flops)?));
        if cfg.timing {
            let ms: Vec<f64> = rs.iter().map(|r| r.timing.as_ref().unwrap().mean_ms).collect();
            measured_slope.push((variant, fit_slope(&ns, &ms)?));
        }
    }
    Ok(ScalingReport {
        records,
        analytic_slope,
        measured_slope,
    })
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCALING_HEADER}\n");
        for r in &self.records {
            let (mean, std) = match &r.timing {
                Some(t) => (format!("{:.4}", t.mean_ms), format!("{:.4}", t.std_ms)),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{mean},{std}",
                r.variant.name(),
                r.input_size,
                r.n,
                r.d,
                r.heads,
                r.flops.attention,
                r.flops.total(),
                r.attention_elements,
            );
        }
        out
    }

    /// Whitespace-separated columns for gnuplot: input size, n, then per
    /// variant attention FLOPs, attention elements and mean milliseconds.
    pub fn to_dat(&self) -> String {
        let mut out = String::from(
            "# input_size n cba_flops sa_flops cba_elements sa_elements cba_ms sa_ms\n",
        );
        let pick = |size: usize, v: Variant| self.records.iter().find(|r| r.input_size == size && r.variant == v);
        let mut sizes: Vec<usize> = self.records.iter().map(|r| r.input_size).collect();
        sizes.dedup();
        for size in sizes {
            let (Some(c), Some(s)) = (pick(size, Variant::Cba), pick(size, Variant::SelfAttention)) else {
                continue;
            };
            let ms = |r: &ScalingRecord| r.timing.as_ref().map_or("nan".to_string(), |t| format!("{:.4}", t.mean_ms));
            let _ = writeln!(
                out,
                "{size} {} {} {} {} {} {} {}",
                c.n,
                c.flops.attention,
                s.flops.attention,
                c.attention_elements,
                s.attention_elements,
                ms(c),
                ms(s)
            );
        }
        out
    }

    /// Measured self-attention / channel-attention time ratio per size.
    pub fn time_ratios(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for c in self.records.iter().filter(|r| r.variant == Variant::Cba) {
            let s = self
                .records
                .iter()
                .find(|r| r.variant == Variant::SelfAttention && r.input_size == c.input_size);
            if let (Some(tc), Some(ts)) = (c.timing.as_ref(), s.and_then(|s| s.timing.as_ref())) {
                out.push((c.input_size, ts.mean_ms / tc.mean_ms));
            }
        }
        out
    }
}
