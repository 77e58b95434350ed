use std::path::Path;
use std::process::{Command, Output};

fn tempr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempr")).args(args).output().unwrap()
}

fn synth(dir: &Path) -> String {
    let data = dir.join("d.tprv").to_string_lossy().into_owned();
    let out = tempr(&[
        "synth", "--classes", "2", "--clips-per-class", "4", "--frames", "8", "--height", "8", "--width", "8", "--out", &data,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

const SMALL: [&str; 14] = [
    "--enc-channels", "8", "--grid", "2,2,2", "--frames", "4", "--scales", "2", "--latent-dim", "4", "--layers", "1",
    "--epochs", "1",
];

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let mut args = vec!["train", "--data", &data, "--out", &run, "--lr", "1e-3", "--train-split", "all", "--eval-split", "all"];
    args.extend(SMALL);
    let out = tempr(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("agg_top1"));

    let ckpt = dir.path().join("run/checkpoint.bin").to_string_lossy().into_owned();
    let json = dir.path().join("eval.json").to_string_lossy().into_owned();
    let out = tempr(&["eval", "--checkpoint", &ckpt, "--data", &data, "--split", "all", "--out", &json]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 10);

    let metrics = dir.path().join("run/metrics.json").to_string_lossy().into_owned();
    let rep = dir.path().join("rep").to_string_lossy().into_owned();
    let out = tempr(&["report", "--inputs", &metrics, "--out", &rep]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("rep/results.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run").to_string_lossy().into_owned();
    for bad in [["--rho", "1.5"], ["--layers", "0"], ["--heads-self", "3"], ["--train-rho", "fixed:0"], ["--grid", "2,2"]] {
        let mut args = vec!["train", "--data", &data, "--out", &run];
        args.extend(bad);
        let out = tempr(&args);
        assert_eq!(out.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = tempr(&["train", "--data", &data, "--out", &run, "--strategy", "spiral"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tempr(&["ablate", "--axis", "depth", "--values", "1", "--data", &data, "--out", &run]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run").to_string_lossy().into_owned();
    let mut args = vec!["train", "--data", &data, "--out", &run, "--lr", "1e300", "--train-split", "all"];
    args.extend(SMALL);
    args.pop();
    args.push("20");
    let out = tempr(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn missing_file_exits_1() {
    let out = tempr(&["eval", "--checkpoint", "/nonexistent/c.bin", "--data", "/nonexistent/d.tprv"]);
    assert_eq!(out.status.code(), Some(1));
}
