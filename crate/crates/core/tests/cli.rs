use std::path::Path;
use std::process::{Command, Output};

use acam::config::RunConfig;
use acam::multiscale::{initial_scale_model, read_checkpoint, MultiScaleModel};

const TINY: &str = "\
scales = 2
categories = 3
epochs = 1
batch_size = 4
image_size = 16
backbone_widths = 3,4,6
n_classifiers = 2
train_per_class = 2
test_per_class = 2
patch_size = 6
texture_period = 3
";

fn acam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acam")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `TINY` plus `extra` and a synthetic dataset into `dir`.
fn setup(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let out = acam(&["synth", "--config", s(&cfg), "--out", s(&dir.join("data"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    cfg
}

#[test]
fn synth_writes_manifests_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = acam(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("data"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("image_size = 16"), "{text}");
    assert!(text.contains("# seed 42"), "{text}");
    let train = std::fs::read_to_string(dir.path().join("data/train.csv")).unwrap();
    assert_eq!(train.lines().count(), 1 + 6);
}

#[test]
fn zero_epoch_train_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "epochs = 0\n");
    let ckpt = dir.path().join("m.ckpt");
    let out = acam(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("data")), "--out", s(&ckpt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rc = RunConfig::load(&cfg).unwrap();
    let got = read_checkpoint(&ckpt, rc.settings()).unwrap();
    let want = MultiScaleModel::new(
        (0..rc.scales).map(|s| initial_scale_model(&rc.spec(), s, rc.seed).unwrap()).collect(),
        rc.settings(),
    )
    .unwrap();
    assert_eq!(got, want);
}

#[test]
fn train_eval_attend_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    let crops = dir.path().join("crops.csv");
    let out = acam(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--crops", s(&crops)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let crop_rows = std::fs::read_to_string(&crops).unwrap();
    assert_eq!(crop_rows.lines().count(), 1 + 6);

    let report = dir.path().join("rep");
    let out = acam(&["eval", "--config", s(&cfg), "--model", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("metric,scale1,scale2,ms"));
    let table = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    assert!(table.starts_with("metric,scale1,scale2,ms\n"));
    let summary = std::fs::read_to_string(report.with_extension("txt")).unwrap();
    assert!(summary.contains("images = 6"), "{summary}");

    let prefix = dir.path().join("heat/a");
    std::fs::create_dir(dir.path().join("heat")).unwrap();
    let image = data.join("test/000000.ppm");
    let out = acam(&["attend", "--config", s(&cfg), "--model", s(&ckpt), "--image", s(&image), "--out-prefix", s(&prefix)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut files: Vec<String> = std::fs::read_dir(dir.path().join("heat"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        ["a_scale1_overlay.ppm", "a_scale1_raw.pgm", "a_scale2_overlay.ppm", "a_scale2_raw.pgm"]
    );

    let table = dir.path().join("scales.csv");
    let out = acam(&["ablate", "--config", s(&cfg), "--data", s(&data), "--which", "scales", "--out", s(&table)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = std::fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().next(), Some("scales,accuracy"));
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn bad_checkpoint_is_reported_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"JUNKJUNK").unwrap();
    let out = acam(&["eval", "--config", s(&cfg), "--model", s(&ckpt), "--data", s(&dir.path().join("data"))]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("error[checkpoint-format]"), "{err}");
    assert!(err.contains("bad magic"), "{err}");
}

#[test]
fn bad_config_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "scales = 2\n\nlearning_rate = 0.1\n").unwrap();
    let out = acam(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("error[config]"), "{err}");
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn unknown_flag_prints_usage() {
    let out = acam(&["train", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_lists_subcommands_and_defaults() {
    let out = acam(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for word in ["synth", "train", "eval", "attend", "ablate", "configs/paper.cfg"] {
        assert!(text.contains(word), "{word} missing from help:\n{text}");
    }
    let out = acam(&["ablate", "--help"]);
    let text = stdout(&out);
    for word in ["--which", "--n-list", "losses", "nclf", "scales"] {
        assert!(text.contains(word), "{word} missing from ablate help:\n{text}");
    }
}
