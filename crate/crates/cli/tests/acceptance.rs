//! Acceptance run: one status line per criterion.
//!
//! `cargo test -p csvt-cli --test acceptance -- 3 4` runs a subset.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use csvt_core::bench::{model_macs, run_scaling, ScalingConfig, Variant};
use csvt_core::ssl::{ema_update, lambda_schedule, SslConfig};
use csvt_core::testing::{grad_check, model_pair, oracle_suite, sampled_grad_check, ModelLoss, OpCase};
use csvt_core::{CsvtConfig, CsvtModel, Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const PAPER_PARAMS_M: f64 = 25.87;
const PAPER_GMAC: f64 = 4.71;
const BAND: f64 = 0.15;
const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    /// Out of band, with the discrepancy traced to a documented ambiguity.
    Deviation,
    Fail,
}

impl Status {
    fn from(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    fn word(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Deviation => "DEVIATION",
            Status::Fail => "FAIL",
        }
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn csvt(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_csvt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("csvt {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(path: &Path, lines: &[&str]) {
    let mut text = String::from("preset = desk\n");
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// The 512-image synthetic set shared by the training criteria.
fn dataset() -> Result<PathBuf, String> {
    let dir = work_dir().join("synth512");
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        csvt(&["synth-data", "--out", s(&dir), "--per-class", "128", "--seed", "0"])?;
    }
    Ok(manifest)
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

/// Means over five equal contiguous chunks of the series.
fn quintile_means(xs: &[f64]) -> Vec<f64> {
    (0..5)
        .map(|q| {
            let chunk = &xs[q * xs.len() / 5..(q + 1) * xs.len() / 5];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect()
}

fn accuracy(metrics_csv: &Path) -> f64 {
    let rows = read_csv(metrics_csv);
    let row = rows.iter().find(|r| r[0] == "mean" && r[1] == "accuracy").unwrap();
    row[2].parse().unwrap()
}

fn gradient_suite() -> Result<Outcome, String> {
    let start = Instant::now();
    let e = |r: csvt_core::Result<f64>| r.map_err(|e| e.to_string());
    let (mut op64, mut op32) = (0.0f64, 0.0f64);
    for case in OpCase::ALL {
        for seed in 0..3 {
            op64 = op64.max(e(grad_check::<f64, _>(&case, &case.inputs(seed), H))?);
            op32 = op32.max(e(grad_check::<f32, _>(&case, &case.inputs(seed), H))?);
        }
    }
    let loss = ModelLoss::new(CsvtConfig::desk(), 16, 2, 7);
    let params = loss.params(0).map_err(|e| e.to_string())?;
    let (d64, c64) = sampled_grad_check::<f64, _>(&loss, &params, 6, 2, 1, H).map_err(|e| e.to_string())?;
    let (d32, c32) = sampled_grad_check::<f32, _>(&loss, &params, 6, 2, 1, H).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ok = op64 < 1e-6 && d64.max(c64) < 1e-6 && op32 < 1e-3 && d32.max(c32) < 1e-3 && secs < 300.0;
    Ok(Outcome {
        status: Status::from(ok),
        detail: format!(
            "{} ops: f64 {op64:.1e}, f32 {op32:.1e}; desk model: f64 {:.1e}, f32 {:.1e}; {secs:.0}s",
            OpCase::ALL.len(),
            d64.max(c64),
            d32.max(c32)
        ),
    })
}

fn oracle_equivalence() -> Result<Outcome, String> {
    let worst = oracle_suite(25, 42).map_err(|e| e.to_string())?;
    let ok = worst.iter().all(|(_, e)| *e < 1e-5);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(Outcome {
        status: Status::from(ok),
        detail: format!("25 instances, max abs deviation: {}", parts.join(", ")),
    })
}

fn within(value: f64, target: f64) -> bool {
    (value / target - 1.0).abs() <= BAND
}

fn band(value: f64) -> &'static str {
    if within(value, PAPER_GMAC) {
        "in band"
    } else {
        "out of band"
    }
}

fn architecture_fidelity() -> Result<Outcome, String> {
    let cfg = CsvtConfig::paper();
    let head = SslConfig::paper();
    let mut model = CsvtModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let backbone = model.param_count(|_| true) as f64 / 1e6;
    model.add_projection_head(head.proj_hidden, head.proj_bottleneck, head.out_dim, &mut ChaCha8Rng::seed_from_u64(1));
    let total = model.param_count(|_| true) as f64 / 1e6;
    let gmac = model_macs(&cfg, 224, 224).map_err(|e| e.to_string())?.total() as f64 / 1e9;
    let p16 = CsvtConfig { patch_size: 16, ..cfg };
    let gmac16 = model_macs(&p16, 224, 224).map_err(|e| e.to_string())?.total() as f64 / 1e9;
    let params_ok = within(total, PAPER_PARAMS_M);
    let status = if !params_ok {
        Status::Fail
    } else if within(gmac, PAPER_GMAC) {
        Status::Pass
    } else if within(gmac16, PAPER_GMAC) {
        Status::Deviation
    } else {
        Status::Fail
    };
    Ok(Outcome {
        status,
        detail: format!(
            "params {total:.2}M (backbone {backbone:.2}M + projection head) vs {PAPER_PARAMS_M}M; \
             GMac at 224² with p=8 {gmac:.2} vs {PAPER_GMAC} ({}); \
             the same architecture with 16-pixel patches gives {gmac16:.2} GMac ({})",
            band(gmac),
            band(gmac16)
        ),
    })
}

fn complexity() -> Result<Outcome, String> {
    let start = Instant::now();
    let dir = work_dir();
    let csv = dir.join("bench.csv");
    csvt(&["bench", "--repeats", "10", "--out", s(&csv), "--dat", s(&dir.join("bench.dat"))])?;
    let analytic = run_scaling(&ScalingConfig {
        timing: false,
        ..ScalingConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let slope = |v: Variant| analytic.analytic_slope.iter().find(|(w, _)| *w == v).unwrap().1;
    let (cba, sa) = (slope(Variant::Cba), slope(Variant::SelfAttention));
    let rows = read_csv(&csv);
    let pick = |name: &str, col: usize| -> Vec<f64> { rows.iter().filter(|r| r[0] == name).map(|r| r[col].parse().unwrap()).collect() };
    let (cba_ms, sa_ms) = (pick(Variant::Cba.name(), 8), pick(Variant::SelfAttention.name(), 8));
    let ratios: Vec<f64> = sa_ms.iter().zip(&cba_ms).map(|(a, b)| a / b).collect();
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    let mem = pick(Variant::Cba.name(), 7);
    let constant = mem.iter().all(|&m| m == mem[0]);
    let secs = start.elapsed().as_secs_f64();
    let ok = (0.9..=1.1).contains(&cba) && (1.9..=2.1).contains(&sa) && increasing && constant && ratios.len() == 5 && secs < 600.0;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    Ok(Outcome {
        status: Status::from(ok),
        detail: format!(
            "exponents CBA {cba:.4}, self-attention {sa:.4}; time ratios [{}]; CBA attention elements {} at every size; {secs:.0}s",
            shown.join(", "),
            mem[0]
        ),
    })
}

fn ssl_sanity() -> Result<Outcome, String> {
    let start = Instant::now();
    let manifest = dataset()?;
    let dir = work_dir();
    let bound = 0.5 * (SslConfig::desk().out_dim as f64).ln();
    let cfg = dir.join("ssl.cfg");
    write_config(&cfg, &[]);
    let log = dir.join("ssl_loss.csv");
    csvt(&["--config", s(&cfg), "pretrain", "--manifest", s(&manifest), "--out", s(&dir.join("ssl.ckpt")), "--log", s(&log)])?;
    let rows = read_csv(&log);
    let (loss, entropy) = (column(&rows, 5), column(&rows, 6));
    let q = quintile_means(&loss);
    let decreasing = q.windows(2).all(|w| w[1] < w[0]);
    let min_entropy = entropy.iter().cloned().fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();

    let raw = dir.join("ssl_nocenter.cfg");
    write_config(&raw, &["ssl.centering = false", &format!("ssl.stop_below_entropy = {bound}")]);
    let raw_log = dir.join("ssl_nocenter_loss.csv");
    csvt(&["--config", s(&raw), "pretrain", "--manifest", s(&manifest), "--out", s(&dir.join("ssl_nocenter.ckpt")), "--log", s(&raw_log)])?;
    let raw_rows = read_csv(&raw_log);
    let raw_entropy = column(&raw_rows, 6);
    let collapse = raw_entropy.iter().position(|&h| h < bound);

    let ok = decreasing && min_entropy > bound && collapse.is_some() && secs < 1800.0;
    let shown: Vec<String> = q.iter().map(|v| format!("{v:.3}")).collect();
    Ok(Outcome {
        status: Status::from(ok),
        detail: format!(
            "{} steps, quintile loss means [{}]; min teacher entropy {min_entropy:.3} vs bound {bound:.3}; \
             without centering entropy {}; {secs:.0}s",
            loss.len(),
            shown.join(", "),
            match collapse {
                Some(i) => format!("{:.3} at step {}", raw_entropy[i], raw_rows[i][0]),
                None => "never fell below the bound".into(),
            }
        ),
    })
}

fn ssl_benefit() -> Result<Outcome, String> {
    let start = Instant::now();
    let manifest = dataset()?;
    let dir = work_dir();
    let ckpt = dir.join("ssl.ckpt");
    if !ckpt.exists() {
        return Err("criterion 5 must run first to produce the SSL checkpoint".into());
    }
    let cfg = dir.join("ft.cfg");
    write_config(&cfg, &[]);
    let (mut ssl, mut scratch) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        for (init, accs) in [(true, &mut ssl), (false, &mut scratch)] {
            let tag = format!("{}_seed{seed}", if init { "ssl" } else { "scratch" });
            let metrics = dir.join(format!("ft_{tag}_metrics.csv"));
            let seed = seed.to_string();
            let out = dir.join(format!("ft_{tag}.ckpt"));
            let log = dir.join(format!("ft_{tag}_log.csv"));
            let mut args = vec!["--config", s(&cfg), "--seed", &seed, "finetune", "--manifest", s(&manifest)];
            args.extend(["--out", s(&out), "--metrics", s(&metrics), "--log", s(&log), "--fold", "0"]);
            if init {
                args.extend(["--init", s(&ckpt)]);
            }
            csvt(&args)?;
            accs.push(accuracy(&metrics));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let ok = mean(&ssl) >= mean(&scratch) && ssl.iter().all(|&a| a >= 0.9) && secs < 2700.0;
    Ok(Outcome {
        status: Status::from(ok),
        detail: format!(
            "held-out fold 0 accuracy, SSL init {ssl:.4?} (mean {:.4}) vs scratch {scratch:.4?} (mean {:.4}); logs in {}; {secs:.0}s",
            mean(&ssl),
            mean(&scratch),
            dir.display()
        ),
    })
}

fn invariants() -> Result<Outcome, String> {
    let e = |r: csvt_core::Error| r.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut equivariance = 0.0f64;
    let mut cov_bound = 0.0f64;
    let mut row_sums = 0.0f64;
    for trial in 0..20u64 {
        let heads = 1 + trial as usize % 3;
        let cfg = CsvtConfig {
            image_size: 16,
            embed_dim: heads * (1 + trial as usize % 4),
            num_layers: 1,
            num_heads: heads,
            ..CsvtConfig::desk()
        };
        let (_, model) = model_pair(&cfg, 0.5, trial).map_err(e)?;
        let (tokens, d) = (2 + trial as usize % 7, cfg.embed_dim);
        let x = Tensor::<f64>::randn(vec![tokens, d], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..tokens).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::from_fn(vec![tokens, d], |i| x.data()[perm[i / d] * d + i % d]);
        let run = |input: &Tensor<f64>| -> csvt_core::Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let v = tape.constant(input.clone());
            let y = model.cba_forward(&mut tape, &bound, 0, v, tokens)?;
            Ok(tape.value(y).clone())
        };
        let (y, py) = (run(&x).map_err(e)?, run(&px).map_err(e)?);
        for i in 0..tokens * d {
            equivariance = equivariance.max((py.data()[i] - y.data()[perm[i / d] * d + i % d]).abs());
        }

        let mut tape = Tape::new();
        let q = tape.constant(Tensor::<f64>::randn(vec![tokens, d], 3.0, &mut rng));
        let k = tape.constant(Tensor::<f64>::randn(vec![tokens, d], 3.0, &mut rng));
        let qn = tape.l2_normalize_cols(q).map_err(e)?;
        let kn = tape.l2_normalize_cols(k).map_err(e)?;
        let kt = tape.transpose(kn).map_err(e)?;
        let c = tape.matmul(kt, qn).map_err(e)?;
        cov_bound = tape.value(c).data().iter().fold(cov_bound, |m, v| m.max(v.abs()));
        let sm = tape.constant(Tensor::<f64>::randn(vec![tokens, d], 50.0, &mut rng));
        let sm = tape.softmax_rows(sm).map_err(e)?;
        let sm = tape.value(sm);
        for r in 0..tokens {
            row_sums = row_sums.max((sm.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }

    let cfg = CsvtConfig::desk();
    let student = CsvtModel::<f64>::new(cfg.clone(), &mut rng).map_err(e)?.params;
    let teacher = CsvtModel::<f64>::new(cfg, &mut rng).map_err(e)?.params;
    let same = |a: &csvt_core::ParamSet<f64>, b: &csvt_core::ParamSet<f64>| a.iter().zip(b.iter()).all(|(x, y)| x == y);
    let (mut t1, mut t0) = (teacher.clone(), teacher.clone());
    ema_update(&mut t1, &student, 1.0).map_err(e)?;
    ema_update(&mut t0, &student, 0.0).map_err(e)?;
    let ema_ok = same(&t1, &teacher) && same(&t0, &student);
    let lambda_ok = lambda_schedule(0, 640).map_err(e)? == 0.996 && lambda_schedule(640, 640).map_err(e)? == 1.0;

    let model = CsvtModel::<f64>::new(CsvtConfig::desk(), &mut rng).map_err(e)?;
    let mut tokens = Vec::new();
    for size in [224, 96] {
        let image = Tensor::<f64>::uniform(vec![size, size, 3], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let (logits, f) = model.forward_logits(&mut tape, &bound, &[image], Mode::Eval).map_err(e)?;
        if tape.value(logits).shape() == [1, 4] {
            tokens.push(f.grid.0 * f.grid.1);
        }
    }
    let sizes_ok = tokens == [784, 144];

    let ok = equivariance < 1e-12 && cov_bound <= 1.0 + 1e-12 && row_sums < 1e-12 && ema_ok && lambda_ok && sizes_ok;
    Ok(Outcome {
        status: Status::from(ok),
        detail: format!(
            "CBA permutation deviation {equivariance:.1e}; max |K̂ᵀQ̂| {cov_bound:.6}; softmax row sum error {row_sums:.1e}; \
             EMA endpoints {}; λ endpoints {}; tokens {tokens:?} with shared weights",
            if ema_ok { "exact" } else { "wrong" },
            if lambda_ok { "0.996/1.0" } else { "wrong" }
        ),
    })
}

fn determinism() -> Result<Outcome, String> {
    let dir = work_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("tiny.cfg");
    write_config(&cfg, &["ssl.epochs = 1", "ssl.batch_size = 8", "ft.epochs = 2", "ft.batch_size = 8"]);
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    for run in ["a", "b"] {
        let r = dir.join(run);
        let data = r.join("data");
        let manifest = data.join("manifest.csv");
        let common = ["--config", s(&cfg), "--seed", "7", "--precision", "f64", "--threads", "1"];
        let go = |extra: &[&str]| {
            let mut args = common.to_vec();
            args.extend_from_slice(extra);
            csvt(&args)
        };
        go(&["synth-data", "--out", s(&data), "--per-class", "5"])?;
        go(&["pretrain", "--manifest", s(&manifest), "--out", s(&r.join("ssl.ckpt")), "--log", s(&r.join("ssl.csv"))])?;
        go(&[
            "finetune", "--manifest", s(&manifest), "--init", s(&r.join("ssl.ckpt")), "--out", s(&r.join("ft.ckpt")),
            "--metrics", s(&r.join("ft_metrics.csv")), "--log", s(&r.join("ft_log.csv")),
        ])?;
        go(&["finetune", "--manifest", s(&manifest), "--out", s(&r.join("cv.ckpt")), "--metrics", s(&r.join("cv_metrics.csv")), "--cv"])?;
        go(&["eval", "--ckpt", s(&r.join("ft.ckpt")), "--manifest", s(&manifest), "--out", s(&r.join("eval.csv"))])?;
        go(&["bench", "--no-timing", "--out", s(&r.join("bench.csv"))])?;
    }
    for name in ["data/manifest.csv", "ssl.csv", "ft_metrics.csv", "ft_log.csv", "cv_metrics.csv", "eval.csv", "bench.csv"] {
        let a = std::fs::read(dir.join("a").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join("b").join(name)).map_err(|e| e.to_string())?;
        compared.push(name);
        if a != b {
            differing.push(name);
        }
    }
    Ok(Outcome {
        status: Status::from(differing.is_empty()),
        detail: format!("{} CSV outputs compared across two f64 single-thread runs, differing: {differing:?}", compared.len()),
    })
}

type Criterion = (u8, &'static str, fn() -> Result<Outcome, String>);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient suite", gradient_suite),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "architecture fidelity", architecture_fidelity),
        (4, "complexity scaling", complexity),
        (5, "self-distillation sanity", ssl_sanity),
        (6, "self-distillation benefit", ssl_benefit),
        (7, "invariant suites", invariants),
        (8, "determinism", determinism),
    ];
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let outcome = run().unwrap_or_else(|err| Outcome {
            status: Status::Fail,
            detail: err,
        });
        println!("criterion {id} [{name}]: {} - {}", outcome.status.word(), outcome.detail);
        if outcome.status == Status::Fail {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
