use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use scalar_core::backbone::BackboneConfig;
use scalar_core::config::RunConfig;
use scalar_core::control::EncoderConfig;
use scalar_core::data::Image;
use scalar_core::data::pnm::{read_pnm, write_pnm};
use scalar_core::model::ModelConfig;
use scalar_core::train::{TokenizerStage, TrainConfig};
use tempfile::TempDir;

fn scalar(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalar"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("SCALAR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = s.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {s:?}");
    lines[0].to_string()
}

fn tiny_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            backbone: BackboneConfig {
                layers: 2,
                d_model: 32,
                heads: 2,
                ..Default::default()
            },
            encoder: EncoderConfig {
                depth: 2,
                width: 16,
                ..Default::default()
            },
            ..Default::default()
        },
        tokenizer: TokenizerStage {
            steps: 20,
            batch_size: 8,
            init_images: 16,
            ..Default::default()
        },
        pretrain: TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Sorted (relative path, bytes) of every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Work directory with a 24-sample corpus and one trained run, shared by the
/// inference tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn write_config(wd: &Path, name: &str, cfg: &RunConfig) {
    fs::write(wd.join(name), cfg.to_toml()).unwrap();
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path();
        ok(&scalar(wd, &["dataset-gen", "--count", "24", "--seed", "3", "--out", "data"]));
        write_config(wd, "run.toml", &tiny_config());
        ok(&scalar(wd, &["train", "--config", "run.toml"]));
        Fixture { dir }
    })
}

#[test]
fn dataset_gen_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&scalar(a.path(), &["dataset-gen", "--count", "6", "--seed", "9", "--out", "d"]));
    ok(&scalar(b.path(), &["dataset-gen", "--count", "6", "--seed", "9", "--out", "d"]));
    let ta = tree(&a.path().join("d"));
    assert_eq!(ta.len(), 1 + 6 * 6);
    assert!(ta == tree(&b.path().join("d")));
}

#[test]
fn dataset_gen_zero_count_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = scalar(d.path(), &["dataset-gen", "--count", "0", "--seed", "1", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[usage]:"));
    assert!(!d.path().join("d").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = scalar(d.path(), &["paint"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("usage:"));
}

#[test]
fn invalid_freeze_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), "[train]\nfreeze = \"frz-half\"\n").unwrap();
    let out = scalar(d.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[invalid]:"), "{line}");
    assert!(line.contains("frz-none") && line.contains("frz-sa") && line.contains("frz-all"), "{line}");
    assert!(!d.path().join("run").exists());
}

#[test]
fn missing_checkpoint_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let out = scalar(d.path(), &["generate", "--checkpoint", "nope.ckpt", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[io]:"));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("x.ckpt"), b"not a checkpoint").unwrap();
    let out = scalar(d.path(), &["generate", "--checkpoint", "x.ckpt", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[checkpoint]:"));
}

#[test]
fn training_writes_run_files() {
    let wd = fixture().path();
    for f in ["config.toml", "pretrain.ckpt", "pretrain_loss.csv", "model.ckpt", "loss.csv"] {
        assert!(wd.join("run").join(f).is_file(), "{f} missing");
    }
    let loss = fs::read_to_string(wd.join("run/loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,ce,align,total"));
    // 24 samples in batches of 8 for 2 epochs
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
}

#[test]
fn training_is_reproducible_and_resume_matches() {
    let wd = fixture().path();
    // same data and seed in a second directory, stopped after one epoch
    let other = tempfile::tempdir().unwrap();
    let od = other.path();
    fs::create_dir_all(od.join("data")).unwrap();
    ok(&scalar(od, &["dataset-gen", "--count", "24", "--seed", "3", "--out", "data"]));
    let mut cfg = tiny_config();
    cfg.train.epochs = 1;
    write_config(od, "run.toml", &cfg);
    ok(&scalar(od, &["train", "--config", "run.toml"]));
    // the pretrain checkpoints differ only in the embedded config snapshot
    write_config(od, "run.toml", &tiny_config());
    fs::copy(od.join("run/model.ckpt"), od.join("epoch1.ckpt")).unwrap();
    ok(&scalar(od, &["train", "--config", "run.toml", "--resume", "epoch1.ckpt"]));
    assert!(fs::read(wd.join("run/model.ckpt")).unwrap() == fs::read(od.join("run/model.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(wd.join("run/loss.csv")).unwrap(),
        fs::read_to_string(od.join("run/loss.csv")).unwrap()
    );
}

#[test]
fn resume_with_other_projection_rejected() {
    let wd = fixture().path();
    let mut cfg = tiny_config();
    cfg.out = "other".into();
    cfg.train.projection.injection = "s1".parse().unwrap();
    write_config(wd, "s1.toml", &cfg);
    let out = scalar(wd, &["train", "--config", "s1.toml", "--resume", "run/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("projection"));
}

#[test]
fn generate_is_deterministic() {
    let wd = fixture().path();
    let args = |out: &'static str| {
        vec![
            "generate",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            out,
            "--class",
            "2",
            "--count",
            "3",
            "--control",
            "data/samples/00000_edge.pgm",
            "--seed",
            "5",
        ]
    };
    ok(&scalar(wd, &args("gen_a")));
    ok(&scalar(wd, &args("gen_b")));
    let a = tree(&wd.join("gen_a"));
    assert_eq!(a.len(), 3);
    assert!(a == tree(&wd.join("gen_b")));
    let img = read_pnm(&wd.join("gen_a/sample_000.ppm")).unwrap();
    assert_eq!((img.width, img.height, img.channels), (32, 32, 3));
}

#[test]
fn generate_rejects_bad_class() {
    let wd = fixture().path();
    let out = scalar(
        wd,
        &["generate", "--checkpoint", "run/model.ckpt", "--out", "g", "--class", "99"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[invalid]:"));
}

#[test]
fn evaluate_reports_each_modality() {
    let wd = fixture().path();
    let args = |out: &'static str| {
        vec![
            "evaluate",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            out,
            "--count",
            "8",
            "--modalities",
            "canny,depth",
        ]
    };
    let stdout = ok(&scalar(wd, &args("eval_a")));
    ok(&scalar(wd, &args("eval_b")));
    let csv = fs::read_to_string(wd.join("eval_a/report.csv")).unwrap();
    assert_eq!(stdout, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "modality,metric,consistency,frechet,count,config_hash");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("canny,f1,"));
    assert!(lines[2].starts_with("depth,rmse,"));
    assert!(tree(&wd.join("eval_a")) == tree(&wd.join("eval_b")));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(wd.join("eval_a/report.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}

#[test]
fn evaluate_empty_set_rejected() {
    let wd = fixture().path();
    let out = scalar(
        wd,
        &["evaluate", "--checkpoint", "run/model.ckpt", "--out", "e", "--count", "0"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("empty"));
}

#[test]
fn inpaint_runs_and_is_deterministic() {
    let wd = fixture().path();
    let mut mask = vec![false; 32 * 32];
    for y in 8..24 {
        for x in 8..24 {
            mask[y * 32 + x] = true;
        }
    }
    write_pnm(&wd.join("mask.pgm"), &Image::from_mask(32, &mask)).unwrap();
    let args = |out: &'static str| {
        vec![
            "inpaint",
            "--checkpoint",
            "run/model.ckpt",
            "--source",
            "data/samples/00001_image.ppm",
            "--mask",
            "mask.pgm",
            "--out",
            out,
            "--class",
            "1",
            "--seed",
            "2",
        ]
    };
    ok(&scalar(wd, &args("inp/a.ppm")));
    ok(&scalar(wd, &args("inp/b.ppm")));
    assert!(fs::read(wd.join("inp/a.ppm")).unwrap() == fs::read(wd.join("inp/b.ppm")).unwrap());
}

#[test]
fn inpaint_rejects_non_binary_mask() {
    let wd = fixture().path();
    write_pnm(&wd.join("grey.pgm"), &Image::filled(32, 32, 1, 128)).unwrap();
    let out = scalar(
        wd,
        &[
            "inpaint",
            "--checkpoint",
            "run/model.ckpt",
            "--source",
            "data/samples/00001_image.ppm",
            "--mask",
            "grey.pgm",
            "--out",
            "x.ppm",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("binary"));
}

#[test]
fn ablate_two_cells() {
    let wd = fixture().path();
    let mut cfg = tiny_config();
    cfg.out = "abl".into();
    cfg.pretrained = Some("run/pretrain.ckpt".into());
    cfg.train.epochs = 1;
    cfg.data.eval_count = 4;
    write_config(wd, "abl.toml", &cfg);
    fs::write(wd.join("grid.toml"), "injection = [\"s1\", \"sall\"]\n").unwrap();
    let stdout = ok(&scalar(wd, &["ablate", "--grid", "grid.toml", "--config", "abl.toml"]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "cell,consistency,final_loss,projection_params,backbone_params");
    assert_eq!(lines.len(), 3);
    let params: Vec<usize> = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    // 2 layers: one injected block against two
    assert_eq!(params[1], 2 * params[0]);
    assert_eq!(fs::read_to_string(wd.join("abl/ablation.csv")).unwrap(), stdout);
}

#[test]
fn ablate_empty_grid_rejected() {
    let wd = fixture().path();
    fs::write(wd.join("empty.toml"), "injection = []\n").unwrap();
    let out = scalar(wd, &["ablate", "--grid", "empty.toml", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("empty grid"));
}

#[test]
fn env_seed_overrides_config() {
    let wd = fixture().path();
    let run = |seed: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_scalar"))
            .arg("--workdir")
            .arg(wd)
            .args(["generate", "--checkpoint", "run/model.ckpt", "--out", out])
            .env("SCALAR_SEED", seed)
            .output()
            .unwrap()
    };
    ok(&run("11", "env_a"));
    ok(&run("11", "env_b"));
    ok(&run("12", "env_c"));
    assert!(tree(&wd.join("env_a")) == tree(&wd.join("env_b")));
    assert!(tree(&wd.join("env_a")) != tree(&wd.join("env_c")));
    let bad = run("minus one", "env_d");
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr_line(&bad).contains("SCALAR_SEED"));
}
