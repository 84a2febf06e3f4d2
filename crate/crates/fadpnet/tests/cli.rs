//! End-to-end runs of the binary: every verb once, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fadpnet");

/// Tiny model at 16×16 so each verb runs in well under a second.
const CONFIG: &str = r#"
[model]
base_channels = 8
lfeb_per_level = [1, 1, 1]
hfeb_per_level = [1, 1, 1]
hfeb_wide_blocks = 1
temp_hidden = 4
prompt = { prompts = 4, rank = 1, state_dim = 4 }

[train]
lr = 1e-3
batch = 2
max_steps = 2
checkpoint_every = 1
eval_every = 2
augment = false

[data]
size = 16
scale = 4

[profile]
runs = 1
size = 16

[spectrum]
split = "test"
"#;

fn run(cfg: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg(cfg).args(args).env_remove("FADPNET_DATA_ROOT").output().expect("binary runs")
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = run(cfg, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.toml");
    let data = dir.join("data");
    let runs = dir.join("run");
    let text = format!("{CONFIG}\n").replace(
        "[data]\n",
        &format!("[data]\nroot = {:?}\n", data.display().to_string()),
    );
    let text = text.replace("[train]\n", &format!("[train]\nout_dir = {:?}\n", runs.display().to_string()));
    std::fs::write(&cfg, text).unwrap();
    ok(&cfg, &["synth", "--out-dir", data.to_str().unwrap(), "--train", "2", "--val", "1", "--test", "2"]);
    cfg
}

#[test]
fn every_verb_runs_on_a_tiny_setup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run_dir = dir.path().join("run");

    let log = ok(&cfg, &["train"]);
    assert_eq!(log.lines().next(), Some("step,loss,lr,time_ms"));
    assert_eq!(log.lines().count(), 3);
    assert!(run_dir.join("config.toml").is_file());
    assert_eq!(std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap(), log);
    assert_eq!(std::fs::read_to_string(run_dir.join("val_log.csv")).unwrap().lines().count(), 2);
    let ck = run_dir.join("checkpoints/latest.safetensors");
    let ck = ck.to_str().unwrap();

    // Resume past the end of the budget: nothing more to do, log untouched.
    let resumed = ok(&cfg, &["train", "--resume", ck]);
    assert!(resumed.lines().count() <= 1);

    let metrics = ok(&cfg, &["eval", "--checkpoint", ck]);
    assert!(metrics.starts_with("image_id,psnr,ssim\n"));
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(metrics, ok(&cfg, &["eval", "--checkpoint", ck]));
    let bicubic = run(&cfg, &["eval", "--bicubic", "--split", "train"]);
    assert!(bicubic.status.success());
    assert!(String::from_utf8_lossy(&bicubic.stderr).contains("psnr_rgb_mean"));

    let img = dir.path().join("data/test_0000.png");
    let out_dir = dir.path().join("sr");
    let written = ok(&cfg, &["infer", "--checkpoint", ck, "--degrade", "--out-dir", out_dir.to_str().unwrap(), img.to_str().unwrap()]);
    assert!(written.trim_end().ends_with("test_0000_sr.png"));
    assert!(out_dir.join("test_0000_sr.png").is_file());

    let profile = ok(&cfg, &["profile", "--breakdown"]);
    for key in ["params", "flops", "latency_ms", "batch", "precision"] {
        assert!(profile.lines().any(|l| l.starts_with(key)), "missing {key} in\n{profile}");
    }
    assert!(profile.contains("params.shallow = "));

    let spectrum = ok(&cfg, &["spectrum", "--checkpoint", ck]);
    assert_eq!(spectrum.lines().collect::<Vec<_>>()[0], "source,band_low,band_mid,band_high");
    assert_eq!(spectrum.lines().count(), 3);
    assert_eq!(run(&cfg, &["spectrum", "--checkpoint", ck, "--level", "9"]).status.code(), Some(2));

    let table = dir.path().join("ablate.csv");
    ok(&cfg, &["ablate", "--flags", "no_dpa,swap_branches", "--out", table.to_str().unwrap(), "--set", "train.max_steps=1"]);
    let table = std::fs::read_to_string(table).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(2).unwrap().starts_with("no_dpa,"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let code = |args: &[&str]| run(&cfg, args).status.code();

    // Configuration problems.
    assert_eq!(code(&["profile", "--set", "model.base_channels=7"]), Some(2));
    assert_eq!(code(&["profile", "--set", "model.unknown=1"]), Some(2));
    assert_eq!(code(&["ablate", "--flags", "no_such_flag"]), Some(2));
    assert_eq!(code(&["eval", "--bicubic", "--split", "holdout"]), Some(2));
    assert_eq!(run(&dir.path().join("absent.toml"), &["profile"]).status.code(), Some(2));

    // Data problems.
    assert_eq!(code(&["eval", "--bicubic", "--set", "data.manifest=none.csv"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent.safetensors"]), Some(3));
    assert_eq!(code(&["infer", "--checkpoint", "/nonexistent.safetensors", "a.png"]), Some(3));

    // A diverging run stops with the numerical-failure code.
    assert_eq!(code(&["train", "--set", "train.lr=1e30", "--set", "train.max_steps=5", "--set", "train.checkpoint_every=0"]), Some(4));
}
