//! End-to-end runs of the `ctmpc` binary on a small config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::{tempdir, TempDir};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn ctmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctmpc")).args(args).output().unwrap()
}

fn stage(name: &str, config: &Path, out: &Path) -> Output {
    ctmpc(&[name, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn full_run(config: &Path) -> TempDir {
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    for s in ["train", "prune", "calibrate", "simulate", "attack-sweep"] {
        let o = stage(s, config, &run);
        assert_eq!(code(&o), 0, "{s}: {}", stderr(&o));
    }
    let o = ctmpc(&["report", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "report: {}", stderr(&o));
    dir
}

fn run_of(dir: &TempDir) -> PathBuf {
    dir.path().join("run")
}

#[test]
fn pipeline_is_deterministic_and_report_is_idempotent() {
    let a = full_run(&tiny_config());
    let b = full_run(&tiny_config());
    for file in [
        "train/member_0.json",
        "train/member_1.json",
        "prune/member_1.json",
        "calibrate/calibrator.json",
        "simulate/episode_000.csv",
        "simulate/summary.csv",
        "attack-sweep/intervals.csv",
        "report/report.json",
    ] {
        let x = fs::read(run_of(&a).join(file)).unwrap();
        let y = fs::read(run_of(&b).join(file)).unwrap();
        assert!(x == y, "{file} differs between identical runs");
    }

    let report = run_of(&a).join("report/report.json");
    let before = fs::read(&report).unwrap();
    let o = ctmpc(&["report", "--out", run_of(&a).to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&report).unwrap(), before);
}

#[test]
fn rerunning_a_stage_is_an_input_error() {
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&stage("train", &tiny_config(), &run)), 0);
    let member = fs::read(run.join("train/member_0.json")).unwrap();
    let o = stage("train", &tiny_config(), &run);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("already exists"), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("train/member_0.json")).unwrap(), member);
}

#[test]
fn missing_dataset_leaves_no_partial_output() {
    let dir = tempdir().unwrap();
    let text = fs::read_to_string(tiny_config()).unwrap().replace(
        "headway_max = 60.0",
        "headway_max = 60.0\ntrain_path = \"/nonexistent/train.csv\"",
    );
    let config = dir.path().join("missing.toml");
    fs::write(&config, text).unwrap();
    let run = dir.path().join("run");
    let o = stage("train", &config, &run);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("/nonexistent/train.csv"));
    let leftovers: Vec<_> = fs::read_dir(&run).map(|d| d.flatten().collect()).unwrap_or_default();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn stage_without_its_inputs_is_an_input_error() {
    let dir = tempdir().unwrap();
    let o = stage("calibrate", &tiny_config(), &dir.path().join("run"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "schema_version = 1\nseed = \"seven\"\n").unwrap();
    let o = stage("train", &config, &dir.path().join("run"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.toml"), "{}", stderr(&o));
}

#[test]
fn report_on_an_empty_directory_is_an_input_error() {
    let dir = tempdir().unwrap();
    let o = ctmpc(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = ctmpc(&["report", "--out", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn corrupt_episode_is_an_integrity_error_naming_file_and_line() {
    let dir = tempdir().unwrap();
    let run = dir.path().join("run");
    for s in ["train", "calibrate", "simulate"] {
        let o = stage(s, &tiny_config(), &run);
        assert_eq!(code(&o), 0, "{s}: {}", stderr(&o));
    }
    let episode = run.join("simulate/episode_000.csv");
    let text = fs::read_to_string(&episode).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[4] = "1.0,not-a-number";
    fs::write(&episode, lines.join("\n") + "\n").unwrap();
    let o = ctmpc(&["report", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("episode_000.csv") && msg.contains("line 5"), "{msg}");
    assert!(!run.join("report").exists());
}
