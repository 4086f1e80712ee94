use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csvt_core::data::Manifest;
use csvt_core::Checkpoint;
use tempfile::TempDir;

fn csvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csvt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CSVT_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = csvt(args);
    assert!(out.status.success(), "csvt {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    manifest: PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.cfg");
    std::fs::write(
        &config,
        "preset = desk\nmodel.num_layers = 2\nssl.epochs = 1\nssl.batch_size = 8\nft.epochs = 1\nft.batch_size = 8\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    ok(&["--config", s(&config), "synth-data", "--out", s(&data), "--per-class", "5"]);
    let manifest = data.join("manifest.csv");
    Fixture { dir, config, manifest }
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = csvt(&["--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unexpected argument") && err.contains("Usage"), "{err}");
}

#[test]
fn missing_manifest_is_an_error() {
    let out = csvt(&["eval", "--ckpt", "nope.ckpt", "--manifest", "nope.csv", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.depth = 3\n").unwrap();
    let out = csvt(&["--config", s(&cfg), "bench", "--no-timing", "--out", s(&dir.path().join("b.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.depth"));
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let f = fixture();
    let d = f.dir.path();
    let m = Manifest::load(&f.manifest, None).unwrap();
    assert_eq!(m.records.len(), 20);
    assert_eq!(m.num_folds().unwrap(), 5);

    let (ssl, ssl_log) = (d.join("ssl.ckpt"), d.join("ssl.csv"));
    ok(&["--config", s(&f.config), "pretrain", "--manifest", s(&f.manifest), "--out", s(&ssl), "--log", s(&ssl_log)]);
    let log = std::fs::read_to_string(&ssl_log).unwrap();
    assert!(log.starts_with("step,epoch,lr,wd,lambda,loss,teacher_entropy"));
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(Checkpoint::load(&ssl).unwrap().get("proj.last.weight").is_some());

    let (ft, metrics) = (d.join("ft.ckpt"), d.join("metrics.csv"));
    ok(&[
        "--config", s(&f.config), "finetune", "--manifest", s(&f.manifest), "--init", s(&ssl), "--out", s(&ft),
        "--metrics", s(&metrics), "--log", s(&d.join("ft.csv")),
    ]);
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().count(), 1 + 6 + 2);
    assert!(text.lines().any(|l| l.starts_with("mean,accuracy,")));

    let eval = d.join("eval.csv");
    ok(&["--config", s(&f.config), "eval", "--ckpt", s(&ft), "--manifest", s(&f.manifest), "--fold", "0", "--out", s(&eval)]);
    // the held-out fold evaluated again reproduces the fine-tune metrics
    let a: Vec<String> = text.lines().skip(1).take(6).map(String::from).collect();
    let b: Vec<String> = std::fs::read_to_string(&eval).unwrap().lines().skip(1).take(6).map(String::from).collect();
    assert_eq!(a, b);

    let pgm = d.join("attn.pgm");
    let image = m.records[0].path.clone();
    ok(&["--config", s(&f.config), "attnmap", "--ckpt", s(&ft), "--image", s(&image), "--out", s(&pgm)]);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n"));
}

#[test]
fn zero_epoch_finetune_still_evaluates() {
    let f = fixture();
    let d = f.dir.path();
    let cfg = d.join("zero.cfg");
    std::fs::write(&cfg, "preset = desk\nmodel.num_layers = 1\nft.epochs = 0\n").unwrap();
    let log = d.join("ft.csv");
    ok(&[
        "--config", s(&cfg), "finetune", "--manifest", s(&f.manifest), "--out", s(&d.join("ft.ckpt")),
        "--metrics", s(&d.join("m.csv")), "--log", s(&log),
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap(), "epoch,lr,loss\n");
}

#[test]
fn incompatible_init_checkpoint_reports_shapes() {
    let f = fixture();
    let d = f.dir.path();
    let small = d.join("small.cfg");
    std::fs::write(&small, "preset = desk\nmodel.embed_dim = 32\nmodel.num_layers = 2\nft.epochs = 1\n").unwrap();
    let ckpt = d.join("small.ckpt");
    ok(&["--config", s(&small), "finetune", "--manifest", s(&f.manifest), "--out", s(&ckpt), "--metrics", s(&d.join("a.csv"))]);
    let out = csvt(&[
        "--config", s(&f.config), "finetune", "--manifest", s(&f.manifest), "--init", s(&ckpt), "--out", s(&d.join("b.ckpt")),
        "--metrics", s(&d.join("b.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incompatible checkpoint") && err.contains("patch_embed.weight"), "{err}");
}

#[test]
fn data_dir_variable_overrides_the_manifest_location() {
    let f = fixture();
    let d = f.dir.path();
    let moved = d.join("moved");
    std::fs::rename(d.join("data"), &moved).unwrap();
    let manifest = moved.join("manifest.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_csvt"))
        .args(["--config", s(&f.config), "finetune", "--manifest", s(&manifest), "--out", s(&d.join("x.ckpt"))])
        .args(["--metrics", s(&d.join("x.csv"))])
        .env("CSVT_DATA_DIR", &moved)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn f64_single_thread_runs_repeat_bit_for_bit() {
    let f = fixture();
    let d = f.dir.path();
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let common = ["--config", s(&f.config), "--seed", "3", "--precision", "f64", "--threads", "1"];
        let (ssl_log, metrics, bench) = (d.join(format!("{tag}_ssl.csv")), d.join(format!("{tag}_m.csv")), d.join(format!("{tag}_b.csv")));
        let ssl = d.join(format!("{tag}.ckpt"));
        let mut a = common.to_vec();
        a.extend(["pretrain", "--manifest", s(&f.manifest), "--out", s(&ssl), "--log", s(&ssl_log)]);
        ok(&a);
        let out = d.join(format!("{tag}_ft.ckpt"));
        let mut b = common.to_vec();
        b.extend(["finetune", "--manifest", s(&f.manifest), "--init", s(&ssl), "--out", s(&out), "--metrics", s(&metrics)]);
        ok(&b);
        let mut c = common.to_vec();
        c.extend(["bench", "--no-timing", "--out", s(&bench)]);
        ok(&c);
        (std::fs::read(ssl_log).unwrap(), std::fs::read(metrics).unwrap(), std::fs::read(bench).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}
