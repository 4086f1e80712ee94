use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use csvt_core::bench::{run_scaling, ScalingConfig};
use csvt_core::checkpoint::write_atomic;
use csvt_core::config::RunConfig;
use csvt_core::data::{load_image, synth_write, Manifest, SynthSpec};
use csvt_core::finetune::{finetune, predict, EpochLog};
use csvt_core::metrics::{attention_saliency, encode_pgm, metrics, ConfusionMatrix, CvReport};
use csvt_core::ssl::{loss_log_csv, pretrain};
use csvt_core::{Checkpoint, CsvtModel, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "csvt", version, about = "Channel-spatial attention vision transformer toolkit")]
struct Cli {
    /// `key = value` run configuration (defaults to the paper preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data preparation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic 4-class image set and a folded manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// `key = value` generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Self-distillation pretraining on the manifest images (labels unused).
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Teacher checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// State dump written if training diverges.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Supervised training on all folds but the held-out one.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Backbone initialization, e.g. a pretraining checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Held-out fold metrics CSV.
        #[arg(long)]
        metrics: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Held-out fold; overrides `ft.eval_fold`.
        #[arg(long)]
        fold: Option<usize>,
        /// Train once per fold and report every fold.
        #[arg(long)]
        cv: bool,
    },
    /// Evaluates a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention-stage cost scaling of channel attention against token attention.
    Bench {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        /// Analytic columns only; leaves timing empty.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        out: PathBuf,
        /// Whitespace-separated table for plotting.
        #[arg(long)]
        dat: Option<PathBuf>,
    },
    /// Patch-token saliency heatmap of one image as a PGM.
    Attnmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::parse("")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !matches!(cli.command, Command::SynthData { .. } | Command::Bench { .. }) {
        log::info!("resolved config:\n{}", cfg.resolved());
    }
    match cli.precision {
        Precision::F32 => dispatch::<f32>(cli.command, &cfg, cli.seed),
        Precision::F64 => dispatch::<f64>(cli.command, &cfg, cli.seed),
    }
}

fn dispatch<T: Scalar>(command: Command, cfg: &RunConfig, seed_flag: Option<u64>) -> Result<()> {
    match command {
        Command::SynthData { out, spec, per_class } => synth(&out, spec.as_deref(), per_class, seed_flag),
        Command::Pretrain { manifest, out, log, dump } => cmd_pretrain::<T>(cfg, &manifest, &out, log.as_deref(), dump.as_deref()),
        Command::Finetune {
            manifest,
            out,
            init,
            metrics,
            log,
            fold,
            cv,
        } => cmd_finetune::<T>(cfg, &manifest, &out, init.as_deref(), &metrics, log.as_deref(), fold, cv),
        Command::Eval { ckpt, manifest, fold, out } => cmd_eval::<T>(cfg, &ckpt, &manifest, fold, &out),
        Command::Bench {
            sizes,
            repeats,
            embed_dim,
            heads,
            patch,
            no_timing,
            out,
            dat,
        } => {
            let mut bc = ScalingConfig {
                repeats,
                embed_dim,
                heads,
                patch_size: patch,
                timing: !no_timing,
                seed: cfg.seed,
                ..ScalingConfig::default()
            };
            if let Some(s) = sizes {
                bc.sizes = s;
            }
            let report = run_scaling(&bc)?;
            for (v, s) in &report.analytic_slope {
                log::info!("{}: analytic attention exponent {s:.4}", v.name());
            }
            for (v, s) in &report.measured_slope {
                log::info!("{}: measured time exponent {s:.4}", v.name());
            }
            write_atomic(&out, report.to_csv().as_bytes())?;
            if let Some(d) = dat {
                write_atomic(&d, report.to_dat().as_bytes())?;
            }
            Ok(())
        }
        Command::Attnmap { ckpt, image, out } => {
            let model = load_model::<T>(cfg, &ckpt)?;
            let img: Tensor<T> = load_image(&image)?.cast();
            let sal = attention_saliency(&model, &img)?;
            write_atomic(&out, &encode_pgm(&sal.map)?)?;
            Ok(())
        }
    }
}

fn synth(out: &Path, spec: Option<&Path>, per_class: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut s = match spec {
        Some(p) => SynthSpec::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    if let Some(n) = per_class {
        s.samples_per_class = n;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    log::info!("resolved spec:\n{}", s.resolved());
    let m = synth_write(&s, out)?;
    log::info!("wrote {} images to {}", m.records.len(), out.display());
    Ok(())
}

fn load_manifest(cfg: &RunConfig, path: &Path) -> Result<Manifest> {
    let base = std::env::var_os("CSVT_DATA_DIR").map(PathBuf::from).or_else(|| cfg.data_dir.clone());
    Manifest::load(path, base.as_deref()).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_images<T: Scalar>(m: &Manifest, which: &[usize]) -> Result<Vec<Tensor<T>>> {
    which
        .iter()
        .map(|&i| {
            let p = &m.records[i].path;
            Ok(load_image(p).with_context(|| format!("reading {}", p.display()))?.cast())
        })
        .collect()
}

fn cmd_pretrain<T: Scalar>(cfg: &RunConfig, manifest: &Path, out: &Path, log_path: Option<&Path>, dump: Option<&Path>) -> Result<()> {
    let m = load_manifest(cfg, manifest)?;
    let all: Vec<usize> = (0..m.records.len()).collect();
    let images = load_images::<T>(&m, &all)?;
    let (state, logs) = pretrain(&images, cfg.model.clone(), &cfg.ssl, cfg.seed, dump, |l| {
        log::debug!("step {} loss {:.5} teacher entropy {:.4}", l.step, l.loss, l.teacher_entropy);
    })?;
    if let Some(last) = logs.last() {
        log::info!("{} steps, final loss {:.5}, teacher entropy {:.4}", logs.len(), last.loss, last.teacher_entropy);
    }
    if let Some(p) = log_path {
        write_atomic(p, loss_log_csv(&logs).as_bytes())?;
    }
    state.teacher.to_checkpoint()?.save(out)?;
    Ok(())
}

fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss\n");
    for l in logs {
        s.push_str(&format!("{},{:e},{:.17e}\n", l.epoch, l.lr, l.loss));
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune<T: Scalar>(
    cfg: &RunConfig,
    manifest: &Path,
    out: &Path,
    init: Option<&Path>,
    metrics_out: &Path,
    log_path: Option<&Path>,
    fold: Option<usize>,
    cv: bool,
) -> Result<()> {
    let m = load_manifest(cfg, manifest)?;
    let k = m.num_folds()?;
    if k < 2 {
        bail!("manifest {} needs at least two folds", manifest.display());
    }
    let eval_fold = fold.unwrap_or(cfg.eval_fold);
    if eval_fold >= k {
        bail!("fold {eval_fold} out of range for {k} folds");
    }
    let init_ckpt = init.map(Checkpoint::load).transpose()?;
    let folds: Vec<usize> = if cv { (0..k).collect() } else { vec![eval_fold] };
    let mut report = CvReport { folds: Vec::new() };
    let mut log_text = String::new();
    for &f in &folds {
        let (train_idx, test_idx) = m.partition(f);
        let train_images = load_images::<T>(&m, &train_idx)?;
        let train: Vec<(Tensor<T>, usize)> = train_images
            .into_iter()
            .zip(&train_idx)
            .map(|(img, &i)| (img, m.records[i].label.index()))
            .collect();
        let mut model = CsvtModel::<T>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        if let Some(ckpt) = &init_ckpt {
            model.load_backbone(ckpt).context("initializing from checkpoint")?;
        }
        let logs = finetune(&mut model, &train, &cfg.ft, cfg.seed.wrapping_add(1), |l| {
            log::info!("fold {f} epoch {} lr {:.3e} loss {:.5}", l.epoch, l.lr, l.loss);
        })?;
        let test_images = load_images::<T>(&m, &test_idx)?;
        let preds = predict(&model, &test_images, cfg.eval_batch)?;
        let labels: Vec<usize> = test_idx.iter().map(|&i| m.records[i].label.index()).collect();
        let cm = ConfusionMatrix::from_predictions(&labels, &preds, cfg.model.num_classes)?;
        let met = metrics(&cm)?;
        log::info!("fold {f}: accuracy {:.4}, macro F1 {:.4}", met.accuracy, met.macro_f1);
        if cv {
            log_text.push_str(&format!("# fold {f}\n"));
        }
        log_text.push_str(&epoch_csv(&logs));
        report.folds.push((f, cm, met));
        if f == eval_fold {
            model.to_checkpoint()?.save(out)?;
        }
    }
    write_atomic(metrics_out, report.to_csv().as_bytes())?;
    if let Some(p) = log_path {
        write_atomic(p, log_text.as_bytes())?;
    }
    Ok(())
}

/// Architecture from the checkpoint's tensor shapes; input size and class
/// token placement from the run configuration.
fn load_model<T: Scalar>(cfg: &RunConfig, ckpt_path: &Path) -> Result<CsvtModel<T>> {
    let ckpt = Checkpoint::load(ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let mut arch = CsvtModel::<T>::config_from_checkpoint(&ckpt, cfg.model.image_size)?;
    arch.class_token_last = cfg.model.class_token_last;
    let mut model = CsvtModel::<T>::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_checkpoint(&ckpt)?;
    Ok(model)
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, ckpt: &Path, manifest: &Path, fold: Option<usize>, out: &Path) -> Result<()> {
    let model = load_model::<T>(cfg, ckpt)?;
    let m = load_manifest(cfg, manifest)?;
    let idx: Vec<usize> = match fold {
        Some(f) => m.partition(f).1,
        None => (0..m.records.len()).collect(),
    };
    if idx.is_empty() {
        bail!("no records to evaluate");
    }
    let images = load_images::<T>(&m, &idx)?;
    let preds = predict(&model, &images, cfg.eval_batch)?;
    let labels: Vec<usize> = idx.iter().map(|&i| m.records[i].label.index()).collect();
    let cm = ConfusionMatrix::from_predictions(&labels, &preds, model.config.num_classes)?;
    let met = metrics(&cm)?;
    log::info!("accuracy {:.4}, macro F1 {:.4} over {} images", met.accuracy, met.macro_f1, idx.len());
    let report = CvReport {
        folds: vec![(fold.unwrap_or(0), cm, met)],
    };
    write_atomic(out, report.to_csv().as_bytes())?;
    Ok(())
}
