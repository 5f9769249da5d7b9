//! Drives the `muldef` binary end to end: determinism of artifacts, config
//! validation surfaced through the process boundary, and the guard that keeps
//! one output directory tied to one config.

use std::path::Path;
use std::process::{Command, Output};

use muldef_cli::config::ConfigFile;
use muldef_cli::pipeline::{RESOLVED_CONFIG, TARGET_MODEL};

/// Small enough to train in well under a second, large enough to exercise
/// every pipeline stage.
const TINY_CONFIG: &str = r#"
[dataset]
source = "synthetic"
train_size = 600
test_size = 200

[model]
architecture = "desk-cnn"

[train]
max_epochs = 1

[attack]
kind = "fgsm"
eps = 0.3
clip_min = 0.0
clip_max = 1.0
iterations = 1

[defense]
num_additional = 2
aug_fraction = 0.05

[eval]
plan = ["indirect"]
draws = 20
eval_subset = 32
repeats = 1
"#;

fn muldef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muldef"))
        .args(args)
        .output()
        .expect("muldef binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).expect("config written");
    path.to_str().expect("utf-8 path").to_string()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_reruns_byte_identical() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    for out in [&out_a, &out_b] {
        let run = muldef(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(run.status.success(), "{}", stderr_of(&run));
    }
    let model_a = std::fs::read(out_a.join(TARGET_MODEL)).expect("model a");
    let model_b = std::fs::read(out_b.join(TARGET_MODEL)).expect("model b");
    assert_eq!(model_a, model_b, "same config must train the same bytes");

    // Rerunning into a finished directory retrains and lands on the same bytes.
    let rerun = muldef(&["train", "--config", &cfg, "--out", out_a.to_str().unwrap()]);
    assert!(rerun.status.success(), "{}", stderr_of(&rerun));
    let model_again = std::fs::read(out_a.join(TARGET_MODEL)).expect("model a again");
    assert_eq!(model_a, model_again);

    // The directory documents its own config, fully resolved.
    let resolved = std::fs::read_to_string(out_a.join(RESOLVED_CONFIG)).expect("resolved config");
    let parsed = ConfigFile::from_toml(&resolved).expect("resolved config parses");
    assert_eq!(
        parsed.resolved().expect("still valid").to_toml().unwrap(),
        resolved
    );
}

#[test]
fn changed_config_in_same_out_dir_is_refused() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();

    let first = muldef(&["train", "--config", &cfg, "--out", out, "--seed", "1"]);
    assert!(first.status.success(), "{}", stderr_of(&first));

    let second = muldef(&["train", "--config", &cfg, "--out", out, "--seed", "2"]);
    assert!(!second.status.success());
    assert!(
        stderr_of(&second).contains("different config"),
        "{}",
        stderr_of(&second)
    );
}

#[test]
fn bad_attack_value_fails_naming_the_field() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(tmp.path(), &TINY_CONFIG.replace("eps = 0.3", "eps = -0.1"));
    let run = muldef(&[
        "train",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(
        stderr_of(&run).contains("attack.eps"),
        "{}",
        stderr_of(&run)
    );
}

#[test]
fn unknown_config_key_fails_with_position() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(tmp.path(), "[train]\nbanana = 1\n");
    let run = muldef(&[
        "train",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    let err = stderr_of(&run);
    assert!(err.contains("banana"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn unknown_preset_fails_listing_the_valid_names() {
    let run = muldef(&["train", "--preset", "nope"]);
    assert!(!run.status.success());
    let err = stderr_of(&run);
    assert!(err.contains("unknown preset"), "{err}");
    assert!(err.contains("mnist-fgsm-wb"), "{err}");
}

#[test]
fn config_and_preset_are_mutually_exclusive() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(tmp.path(), TINY_CONFIG);
    let run = muldef(&["train", "--config", &cfg, "--preset", "mnist-fgsm-wb"]);
    assert!(!run.status.success());
    assert!(
        stderr_of(&run).contains("mutually exclusive"),
        "{}",
        stderr_of(&run)
    );
}

#[test]
fn list_presets_prints_every_name() {
    let run = muldef(&["list-presets"]);
    assert!(run.status.success(), "{}", stderr_of(&run));
    let stdout = String::from_utf8_lossy(&run.stdout).into_owned();
    for name in muldef_cli::presets::PRESET_NAMES {
        assert!(stdout.contains(name), "missing {name} in {stdout}");
    }
}
