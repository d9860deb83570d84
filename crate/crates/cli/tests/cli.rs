use std::path::Path;
use std::process::{Command, Output};

fn idea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idea")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup(dir: &Path, mode: &str, extra: &str) -> String {
    let data = dir.join("data");
    let out = idea(&["synth", "--out", data.to_str().unwrap(), "--classes", "5", "--dim", "12", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = dir.join("exp.json");
    std::fs::write(
        &config,
        format!(r#"{{"mode":"{mode}","shots":4,"seed":0,"dataset":"data"{extra}}}"#),
    )
    .unwrap();
    config.to_str().unwrap().to_string()
}

const TRAIN: &str = r#","train":{"learning_rate":0.5,"epochs":3,"batch_size":8}"#;

#[test]
fn eval_prints_summary_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "idea", r#","output":"report.json""#);
    let out = idea(&["eval", "--config", &config]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("top1="));
    assert!(dir.path().join("report.json").exists());

    let out = idea(&["eval", "--config", &config, "--json"]);
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["mode"], "idea");
    assert!(json["top1_accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn search_full_and_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "idea", "");
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"alphas":[0.2,0.8],"betas":[0,2],"thetas":[1,3]}"#).unwrap();
    let csv = dir.path().join("table.csv");
    let out = idea(&["search", "--config", &config, "--grid", grid.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("best alpha="));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 9);

    let out = idea(&["search", "--config", &config, "--mode", "coordinate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 19);
}

#[test]
fn train_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "tidea", TRAIN);
    let ckpt = dir.path().join("ckpt");
    let out = idea(&["train", "--config", &config, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("epoch ")).count(), 3);
    for f in ["w_proj.emb1", "e_bias.emb1", "checkpoint.json"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_and_shots_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "tidea", TRAIN);
    let out = idea(&["ablate", "--config", &config, "--components", "proj,bias"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 5);

    let out = idea(&["shots", "--config", &config, "--list", "1,2,4", "--seeds", "0,1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 10);
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    let out = idea(&["eval", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("[config]"), "{}", stderr(&out));

    let config = setup(dir.path(), "idea", "");
    let out = idea(&["ablate", "--config", &config, "--components", "proj,gate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("[config]"));

    let too_many = dir.path().join("many.json");
    std::fs::write(&too_many, r#"{"mode":"idea","shots":999,"seed":0,"dataset":"data"}"#).unwrap();
    let out = idea(&["eval", "--config", too_many.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("[sample]"), "{}", stderr(&out));

    std::fs::write(dir.path().join("data/val_labels.txt"), "0\nx\n").unwrap();
    let out = idea(&["search", "--config", &config]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("[load]"), "{}", stderr(&out));
}
