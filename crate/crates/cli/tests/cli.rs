use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
train_per_class = 8
subnet_per_class = 4
encoder_per_class = 4
heldout_per_class = 2
test_per_class = 8

[backbone]
epochs = 1

[subnet]
epochs = 1

[encoder]
epochs = 1

[signature]
epochs = 5

[stream]
batch_size = 16
"#;

fn ltta(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ltta"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if dir.join("cfg.toml").exists() {
        cmd.arg("--config").arg(dir.join("cfg.toml"));
    }
    cmd.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = ltta(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    dir
}

#[test]
fn missing_stages_are_named() {
    let dir = tiny_dir();
    let o = ltta(dir.path(), &["run-stream"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));

    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train-backbone"]);
    ok(dir.path(), &["train-subnets"]);
    let o = ltta(dir.path(), &["run-stream"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-encoders"));
    let o = ltta(dir.path(), &["train-signet"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-encoders"));
}

fn full_run(dir: &Path) {
    for stage in ["gen-data", "train-backbone", "train-subnets", "train-encoders", "train-signet"] {
        ok(dir, &[stage]);
    }
    for m in ["darda", "bn", "entropy", "none"] {
        ok(dir, &["run-stream", "--method", m]);
    }
}

#[test]
fn pipeline_end_to_end() {
    let a = tiny_dir();
    let b = tiny_dir();
    full_run(a.path());
    full_run(b.path());
    for m in ["darda", "bn", "entropy", "none"] {
        let name = format!("out/metrics_{m}.csv");
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{m} metrics differ between identical runs");
    }

    let none = std::fs::read_to_string(a.path().join("out/metrics_none.csv")).unwrap();
    let mut lines = none.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 10);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.split(',').nth(8) == Some("0")));

    let table = ok(a.path(), &["report"]);
    assert!(table.contains("darda") && table.contains("speckle_noise"));
    let report = std::fs::read_to_string(a.path().join("out/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 * 4);

    for f in ["accuracy.csv", "embeddings.csv", "signet.dkpt"] {
        assert!(a.path().join("out").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn user_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), "[stream]\ndelta = 0.0\n").unwrap();
    let o = ltta(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));

    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ltta(dir.path(), &["run-stream", "--method", "cotta"]).status.code(), Some(1));
    assert_eq!(ltta(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let o = ltta(dir.path(), &["--config", "/nonexistent/cfg.toml", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(ltta(dir.path(), &["--help"]).status.code(), Some(0));
}
