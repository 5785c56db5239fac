use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nq_core::formats::{read_nqmx, read_nqpk, write_nqmx};
use nq_core::DenseMatrix;

fn nq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nq"))
}

fn write_matrix(dir: &Path, name: &str, m: &DenseMatrix) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, write_nqmx(m).unwrap()).unwrap();
    p
}

fn wave(rows: usize, cols: usize, phase: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + phase).sin())
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn factorize(dir: &Path, extra: &[&str]) -> Output {
    let l0 = write_matrix(dir, "l0.nqmx", &wave(12, 8, 0.0));
    let l1 = write_matrix(dir, "l1.nqmx", &wave(6, 12, 1.0));
    let calib = write_matrix(dir, "calib.nqmx", &wave(30, 8, 2.0));
    nq().arg("factorize")
        .arg("--input")
        .arg(&l0)
        .arg(&l1)
        .arg("--calib")
        .arg(&calib)
        .arg("--output")
        .arg(dir.join("model.nqpk"))
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn factorize_infer_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = factorize(dir.path(), &["--rank", "3", "--report", dir.path().join("r.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = read_nqpk(&std::fs::read(dir.path().join("model.nqpk")).unwrap()).unwrap();
    assert_eq!(model.layers.len(), 2);
    assert_eq!(model.layers[0].0, "l0");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);
    assert_eq!(report["payload_bits"].as_u64().unwrap(), model.payload_bits());

    let x = write_matrix(dir.path(), "x.nqmx", &wave(8, 5, 0.5));
    let mut outputs = Vec::new();
    for (name, batch) in [("y1.nqmx", false), ("y2.nqmx", true)] {
        let mut cmd = nq();
        cmd.args(["infer", "--model"]).arg(dir.path().join("model.nqpk"));
        cmd.arg("--vector-in").arg(&x).arg("--out").arg(dir.path().join(name));
        if batch {
            cmd.arg("--batch");
        }
        assert_eq!(code(&cmd.output().unwrap()), 0);
        outputs.push(read_nqmx(&std::fs::read(dir.path().join(name)).unwrap()).unwrap());
    }
    assert_eq!(outputs[0].shape(), (6, 5));
    assert_eq!(outputs[0], outputs[1]);

    let out = nq().args(["verify", "--model"]).arg(dir.path().join("model.nqpk")).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&factorize(dir.path(), &["--rank", "99"])), 2);
    assert!(!dir.path().join("model.nqpk").exists());
    assert_eq!(code(&factorize(dir.path(), &["--rank", "2", "--gamma", "1.5"])), 2);
    assert_eq!(code(&factorize(dir.path(), &[])), 2);

    let missing = nq().args(["infer", "--model", "/nonexistent.nqpk", "--vector-in", "x", "--out", "y"]).output().unwrap();
    assert_eq!(code(&missing), 2);

    let garbage = dir.path().join("garbage.nqpk");
    std::fs::write(&garbage, b"NQPK\x01\x00\x00\x00\xff\xff\xff\xff").unwrap();
    assert_eq!(code(&nq().args(["verify", "--model"]).arg(&garbage).output().unwrap()), 2);

    let out = nq().env("NQ_THREADS", "zero").args(["bpw", "--model", "L2-7"]).output().unwrap();
    assert_eq!(code(&out), 2);
    assert_eq!(code(&nq().args(["bpw", "--model", "nope"]).output().unwrap()), 2);
    assert_eq!(code(&nq().args(["bpw", "--model", "L2-7", "--method", "billm", "--c", "60"]).output().unwrap()), 2);
}

#[test]
fn numerical_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_matrix(dir.path(), "zero.nqmx", &DenseMatrix::zeros(4, 4));
    let out = nq()
        .args(["factorize", "--rank", "1", "--input"])
        .arg(&zero)
        .arg("--output")
        .arg(dir.path().join("z.nqpk"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zero"));
}

#[test]
fn bpw_table_and_single_reports() {
    let out = nq().args(["bpw", "--table"]).output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 18);
    assert!(lines[1].starts_with("L2-7,12.55,1.00,1.24,2.88,2.89,"), "{}", lines[1]);
    assert!(lines.iter().all(|l| l.split(',').count() == 28));

    let out = nq().args(["bpw", "--model", "llama-2-7b", "--method", "nanoquant", "--rank", "1"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("bpw\t0.00"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.txt");
    std::fs::write(&cfg, "# toy\nproj 256 256 4\nresidual 0\n").unwrap();
    let out = nq()
        .args(["bpw", "--method", "dbf", "--target-bpw", "1.0", "--shape-config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    // r = round(256·256/512 − 16) = 112, dbf adds 16r bits per layer
    let want = (112.0 * 512.0 + 16.0 * (512.0 + 112.0)) / 65536.0;
    assert!(text.contains(&format!("bpw\t{want:.6}")), "{text}");
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = nq()
        .args(["bench", "--n", "64", "--m", "48", "--rank", "8", "--iters", "3", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("random,64,48,8,"));
}
