//! End-to-end runs of the `fxnet` binary: exit codes and output files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fxnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fxnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_metrics(path: &Path, rows: &[&str]) {
    let mut text = String::from("epoch,train_err,test_err,zero_update_frac,seconds\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for bad in [
        vec!["run", "--set", "no_such_key=1", "--out", out],
        vec!["run", "--rounding", "sideways", "--out", out],
        vec!["run", "--wl", "16", "--fl", "17", "--out", out],
        vec!["run", "--dataset", "cifar10", "--model", "dnn", "--out", out],
        vec!["run", "--not-a-flag"],
    ] {
        let o = fxnet(&bad);
        assert_eq!(code(&o), 1, "{bad:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nothing-here");
    let o = fxnet(&[
        "run",
        "--scale",
        "0.1",
        "--epochs",
        "1",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing-here"));
}

#[test]
fn sysarray_reports_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    let o = fxnet(&[
        "sysarray", "--n", "4", "--l", "8", "--k", "6", "--m", "12", "--freq", "100", "--power", "2", "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("G-ops/s"));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let head: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(head.len(), row.len());
    let field = |name: &str| row[head.iter().position(|h| *h == name).unwrap()];
    assert_eq!(field("n"), "4");
    assert_eq!(field("ops"), (2 * 8 * 6 * 12).to_string());
    assert_eq!(field("macc_ops"), (8 * 6 * 12).to_string());
    assert_eq!(field("tiles"), (2 * 3).to_string());
}

#[test]
fn sysarray_rejects_bad_geometry() {
    assert_eq!(code(&fxnet(&["sysarray", "--n", "0"])), 1);
    assert_eq!(code(&fxnet(&["sysarray", "--fl-in", "20"])), 1);
}

#[test]
fn compare_self_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    write_metrics(&a, &["1,20.0,18.5,0.5,0", "2,10.0,9.25,0.5,0"]);
    write_metrics(&b, &["1,20.0,18.5,0.5,0"]);
    let same = fxnet(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(code(&same), 0);
    let text = stdout(&same);
    assert!(text.contains("final test_err a-b   +0.0000"), "{text}");
    assert!(text.contains("first divergence     none"), "{text}");
    let mismatched = fxnet(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&mismatched), 1);
    assert!(String::from_utf8_lossy(&mismatched.stderr).contains("2 epochs vs 1 epochs"));
    let missing = fxnet(&["compare", a.to_str().unwrap(), dir.path().join("none.csv").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn zero_epochs_writes_header_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    if !data.is_dir() {
        eprintln!("skipping: {} not found", data.display());
        return;
    }
    let out = dir.path().join("run");
    let o = fxnet(&[
        "run", "--scale", "0.1", "--epochs", "0", "--quiet", "--data-dir", data.to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), "epoch,train_err,test_err,zero_update_frac,seconds\n");
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("epochs = 0"));
    assert!(out.join("final.ckpt").is_file());
}
