use std::path::Path;
use std::process::{Command, Output};

fn entres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entres")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn codec_selftest_passes() {
    let out = entres(&["codec-selftest", "--cases", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("passed"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&entres(&["eval", "--bogus"])), 1);
    assert_eq!(code(&entres(&["eval"])), 1);
    assert_eq!(code(&entres(&["attack", "--checkpoint", "x", "--dataset", "y", "--epsilon", "2"])), 1);
    assert_eq!(code(&entres(&["eval", "--checkpoint", "/no/such.entc", "--dataset", "/no/such"])), 1);
}

#[test]
fn help_exits_with_zero() {
    assert_eq!(code(&entres(&["--help"])), 0);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&entres(&["synth", "--out", s(&data), "--train", "10", "--test", "10"])), 0);
    let ck = dir.path().join("bad.entc");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let out = entres(&["eval", "--checkpoint", s(&ck), "--dataset", s(&data), "--output", s(&dir.path().join("r.csv"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_train_evaluate_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ck = dir.path().join("m.entc");
    let csv = dir.path().join("results.csv");
    assert_eq!(code(&entres(&["synth", "--out", s(&data), "--train", "64", "--test", "20", "--seed", "3"])), 0);
    let out = entres(&["train", "--dataset", s(&data), "--out", s(&ck), "--epochs", "1", "--batch-size", "32"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("epoch   1"));

    let common = ["--checkpoint", s(&ck), "--dataset", s(&data), "--limit", "8", "--output", s(&csv)];
    let run = |extra: &[&str]| {
        let mut args = vec![extra[0]];
        args.extend_from_slice(&common);
        args.extend_from_slice(&extra[1..]);
        let out = entres(&args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["eval"]);
    run(&["attack", "--attack", "entropy", "--epsilon", "4/255", "--steps", "2"]);
    run(&["corrupt", "--corruption", "shot_noise", "--severity", "2"]);
    run(&["defend", "--tv-steps", "3"]);
    let rows = entres_core::pipeline::read_results(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.is_ok()));

    let spec = dir.path().join("grid.json");
    let grid_csv = dir.path().join("grid.csv");
    std::fs::write(
        &spec,
        serde_json::json!({
            "checkpoints": [ck],
            "dataset": data,
            "perturbations": [null, {"type": "random_noise", "epsilon": 0.02, "seed": 0}],
            "sample_limit": 4,
            "output": grid_csv,
        })
        .to_string(),
    )
    .unwrap();
    assert_eq!(code(&entres(&["grid", "--config", s(&spec)])), 0);
    let first = std::fs::read_to_string(&grid_csv).unwrap();
    assert_eq!(first.lines().count(), 3);
    assert_eq!(code(&entres(&["grid", "--config", s(&spec)])), 0);
    assert_eq!(std::fs::read_to_string(&grid_csv).unwrap(), first);

    let maps = dir.path().join("maps");
    let out = entres(&["maps", "--checkpoint", s(&ck), "--dataset", s(&data), "--out", s(&maps), "--count", "2", "--steps", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(maps.join("correlations.csv").exists());
}
