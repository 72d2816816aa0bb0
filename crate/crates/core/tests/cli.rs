use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use ggograde::cli::{resolve_train, Cli, Command as Sub};
use clap::Parser;

fn ggograde(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggograde"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove(ggograde::gridrunner::RESULTS_ROOT_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn every_flag_is_documented() {
    let cmd = Cli::command();
    for sub in cmd.get_subcommands() {
        assert!(sub.get_about().is_some(), "{} has no description", sub.get_name());
        for arg in sub.get_arguments() {
            if matches!(arg.get_id().as_str(), "help" | "version") {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{} is undocumented", sub.get_name(), arg.get_id());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    for sub in ["manifest", "preview", "train", "grid", "eval", "retrain-final", "synth"] {
        let o = ggograde(&[sub, "--help"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ggograde(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ggograde(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ggograde(&["train", "--data", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: "));
}

#[test]
fn manifest_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(ggograde(&["synth", "--tiny", "--out", "data", "--scans-per-class", "2", "--val-per-class", "1", "--test-per-class", "1"], p).status.success());
    assert!(ggograde(&["manifest", "--root", "data", "--out", "manifest.csv"], p).status.success());
    let o = ggograde(&["manifest", "--root", "data", "--verify", "manifest.csv"], p);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 discrepancies"));

    let scan = std::fs::read_dir(p.join("data/train")).unwrap().next().unwrap().unwrap().path();
    let slice = std::fs::read_dir(&scan).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(slice).unwrap();
    let o = ggograde(&["manifest", "--root", "data", "--verify", "manifest.csv"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("1 discrepancies"));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[integrity]: "));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = ggograde(&["synth", "--out", out, "--seed", "4", "--scans-per-class", "1", "--val-per-class", "1", "--test-per-class", "1"], p);
        assert!(o.status.success());
    }
    let list = |root: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = walk(root).into_iter().map(|f| (f.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&f).unwrap())).collect();
        v.sort();
        v
    };
    assert_eq!(list(&p.join("a")), list(&p.join("b")));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"arch": "DenseNet", "batch_size": 8, "lr": 0.01, "optimizer": "SGD", "seed": 3}"#).unwrap();
    let cli = Cli::try_parse_from(["ggograde", "train", "--data", "d", "--config", cfg.to_str().unwrap(), "--lr", "0.001", "--arch", "VGG"]).unwrap();
    let Sub::Train(args) = cli.command else { panic!() };
    let cell = resolve_train(&args).unwrap();
    assert_eq!(cell.model_spec.arch, ggograde::model_zoo::Arch::Vgg);
    assert_eq!(cell.train_config.batch_size, 8);
    assert_eq!(cell.train_config.lr, 0.001);
    assert_eq!(cell.train_config.seed, 3);
    assert_eq!(cell.train_config.max_epochs, 500);
    assert_eq!(cell.settings(), "BS8 SGD LR0.001");
}

#[test]
fn train_writes_an_auditable_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(ggograde(&["synth", "--out", "data", "--scans-per-class", "3", "--val-per-class", "1", "--test-per-class", "1"], p).status.success());
    let args = [
        "train", "--data", "data", "--arch", "ResNet152", "--extent", "all", "--bs", "16", "--opt", "adam", "--lr", "0.001",
        "--init", "scratch", "--input-size", "32", "--max-epochs", "1", "--seed", "2", "--results-root", "res",
    ];
    let o = ggograde(&args, p);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs: Vec<_> = std::fs::read_dir(p.join("res/runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    let config = std::fs::read_to_string(run.join("config.json")).unwrap();
    assert!(config.contains("\"settings\": \"BS16 ADAM LR0.001\""));
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    for key in ["run_id", "fingerprint", "manifest_hash", "code_version", "started_at", "finished_at"] {
        assert!(record.get(key).is_some(), "{key}");
    }
    let log = std::fs::read(run.join("log.csv")).unwrap();
    let o = ggograde(&args, p);
    assert!(o.status.success());
    assert_eq!(std::fs::read(run.join("log.csv")).unwrap(), log);

    let ckpt = run.join("best.ckpt");
    let o = ggograde(&["eval", "--data", "data", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = std::fs::read_to_string(run.join("eval/test_predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 5);
}

#[test]
fn missing_pretrained_weights_fail_with_a_pointer_to_scratch_mode() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(ggograde(&["synth", "--out", "data", "--scans-per-class", "2", "--val-per-class", "1", "--test-per-class", "1"], p).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_ggograde"))
        .args(["train", "--data", "data", "--arch", "ResNet152", "--extent", "all", "--bs", "16", "--opt", "adam", "--lr", "0.001"])
        .current_dir(p)
        .env("RUST_LOG", "off")
        .env(ggograde::model_zoo::WEIGHTS_DIR_ENV, p.join("no-weights"))
        .env(ggograde::gridrunner::RESULTS_ROOT_ENV, p.join("res"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scratch"));
    let run = std::fs::read_dir(p.join("res/runs")).unwrap().next().unwrap().unwrap().path();
    assert!(std::fs::read_to_string(run.join("config.json")).unwrap().contains("BS16 ADAM LR0.001"));
}
