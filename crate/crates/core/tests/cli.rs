use std::path::Path;
use std::process::{Command, Output};

fn kfacsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfacsim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn selftest_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfacsim(&["selftest"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn non_divisor_frac_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfacsim(
        &["train", "--seed", "1", "--grad-worker-frac", "0.4", "--world-size", "8"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dist.grad_worker_frac"));
}

#[test]
fn unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfacsim(&["train", "--seed", "1", "--frobnicate"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_seed_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfacsim(&["train"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&kfacsim(&["--help"], dir.path())), 0);
}

#[test]
fn train_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "seed = 5\niterations = 30\n").unwrap();
    let out = kfacsim(
        &[
            "train",
            "--config",
            "run.cfg",
            "--grad-worker-frac",
            "1/2",
            "--kfac-update-freq",
            "10",
            "--factor-update-freq",
            "5",
            "--damping",
            "0.01",
            "--precision",
            "half",
            "--triangular-comm",
            "--out",
            "out/metrics.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let rows = kfacsim::harness::parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), 30);
    let summary = std::fs::read_to_string(dir.path().join("out/metrics.summary")).unwrap();
    assert!(summary.contains("iterations = 30"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), summary);
}

#[test]
fn compare_mismatched_models_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("kfac.cfg"), "seed = 1\niterations = 10\n").unwrap();
    std::fs::write(
        dir.path().join("sgd.cfg"),
        "seed = 1\niterations = 10\noptimizer = sgd\nmodel.layers = dense:2:16:relu, dense:16:2:softmax\n",
    )
    .unwrap();
    let out = kfacsim(
        &["compare", "--config", "kfac.cfg", "--baseline", "sgd.cfg"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.layers"));
}

#[test]
fn sweep_prints_one_row_per_frac() {
    let dir = tempfile::tempdir().unwrap();
    let out = kfacsim(
        &["sweep", "--seed", "1", "--fracs", "1/8,1/4,1/2,1", "--out", "sweep.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let workers: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(workers, ["1", "2", "4", "8"]);
}
