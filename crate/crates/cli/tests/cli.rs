use std::path::Path;
use std::process::{Command, Output};

fn remission(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remission"))
        .args(["--preset", "smoke", "--out"])
        .arg(out)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "status {:?}\n{}", o.status, String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn table_rows(s: &str) -> usize {
    s.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| ID")).count()
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&remission(&a, &["train"]));
    assert_eq!(table_rows(&stdout), 1);
    for f in ["config.toml", "split.txt", "checkpoint.bin", "train_log.jsonl", "report.jsonl", "table.md", "roc.csv", "run.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    ok(&remission(&b, &["train"]));
    for f in ["report.jsonl", "train_log.jsonl", "checkpoint.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let ev = dir.path().join("ev");
    let ckpt = a.join("checkpoint.bin");
    ok(&remission(&ev, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--test-only"]));
    assert!(ev.join("eval_report.jsonl").is_file());
    let other = dir.path().join("other");
    // a checkpoint from another config is evaluated with a warning naming the mismatch
    let o = remission(&other, &["--set", "train.lr=0.01", "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("mismatch"), "{}", String::from_utf8_lossy(&o.stderr));

    let merged = dir.path().join("merged");
    let stdout = ok(&remission(&merged, &["report", a.to_str().unwrap()]));
    assert_eq!(table_rows(&stdout), 1);
    assert!(merged.join("table.md").is_file() && merged.join("roc.csv").is_file());
}

#[test]
fn reports_over_different_datasets_warn() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&remission(&a, &["train"]));
    ok(&remission(&b, &["--set", "data.synth.seed=99", "train"]));
    let o = remission(&dir.path().join("m"), &["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    let stdout = ok(&o);
    assert_eq!(table_rows(&stdout), 2);
    assert!(stdout.contains("IncompatibleReports"), "{stdout}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--set", "train.no_such_key=1", "train"][..], &["--set", "train.epochs=0", "train"], &["--set", "missing-equals", "train"], &["--preset", "bogus", "train"]] {
        let o = remission(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let patch = dir.path().join("patch.toml");
    std::fs::write(&patch, "[train]\nbatch_size = 0\n").unwrap();
    let o = remission(dir.path(), &["--config", patch.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&patch, "[train\n").unwrap();
    let o = remission(dir.path(), &["--config", patch.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(2));
    // usage errors from the argument parser
    assert_eq!(remission(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(remission(dir.path(), &["grid", "--resampling", ""]).status.code(), Some(2));
}

#[test]
fn synth_and_split_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&remission(dir.path(), &["synth", "--summary"]));
    assert!(dir.path().join("data").join("manifest.jsonl").is_file());
    assert!(stdout.lines().count() >= 2, "{stdout}");
    let stdout = ok(&remission(dir.path(), &["split"]));
    assert!(stdout.starts_with("train "), "{stdout}");
    assert!(dir.path().join("split.txt").is_file());
}

#[test]
fn grid_axes_and_cell_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["grid", "--backbones", "ResNet-101", "--sizes", "224", "--resampling", "none,ruao,smote"];
    let o = remission(dir.path(), &args);
    let stdout = ok(&o);
    assert_eq!(table_rows(&stdout), 3, "{stdout}");
    assert!(dir.path().join("grid.md").is_file() && dir.path().join("grid.jsonl").is_file());
    for r in ["NO", "RUAO", "SMOTE"] {
        assert!(stdout.contains(&format!("| {r} |")), "{r}: {stdout}");
    }

    std::fs::remove_dir_all(dir.path().join("cells").join("1.2")).unwrap();
    let o = remission(dir.path(), &args);
    assert_eq!(ok(&o), stdout);
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("grid row 1.1: reusing") && log.contains("grid row 1.3: reusing"), "{log}");
    assert!(!log.contains("grid row 1.2: reusing") && log.contains("grid row 1.2: ResNet-101"), "{log}");
}
