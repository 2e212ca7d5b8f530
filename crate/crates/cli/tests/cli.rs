use std::path::Path;
use std::process::{Command, Output};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fashion-rag"))
        .current_dir(dir)
        .env_remove("FASHIONRAG_PROFILE")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(dir.path(), &["train", "stage1", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_values_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(dir.path(), &["--set", "n_r=7", "toydata", "--n", "8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_r"));

    let o = bin(dir.path(), &["--set", "no_such_key=1", "toydata"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = bin(dir.path(), &["--profile", "huge", "toydata"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("profile"));
}

#[test]
fn stage2_without_stage1_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin(dir.path(), &["--seed", "0", "toydata", "--n", "8", "--out", "toy"]));
    let o = bin(dir.path(), &["--data", "toy", "train", "stage2", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn toy_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(bin(d, &["--seed", "0", "toydata", "--n", "8", "--out", "toy"]));
    assert!(out.contains("6 train / 2 test"), "{out}");

    ok(bin(d, &["--data", "toy", "index", "build"]));
    assert!(d.join("toy/index.frix").exists());
    let hits = ok(bin(
        d,
        &["--data", "toy", "--index", "toy/index.frix", "index", "query", "--caption", "red top", "--k", "2"],
    ));
    assert_eq!(hits.lines().count(), 2, "{hits}");

    let common = ["--data", "toy", "--index", "toy/index.frix", "--runs-dir", "runs", "--profile", "desk"];
    let run = |extra: &[&str]| {
        let mut args = common.to_vec();
        args.extend_from_slice(extra);
        ok(bin(d, &args))
    };
    run(&["train", "stage1", "--steps", "3", "--batch-size", "2"]);
    run(&["train", "stage2", "--steps", "3", "--batch-size", "2"]);

    let runs: Vec<_> = std::fs::read_dir(d.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 2);
    let logs: Vec<_> = runs
        .iter()
        .flat_map(|r| std::fs::read_dir(r.join("reports")).unwrap())
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(logs.contains(&"stage1-loss.tsv".to_string()), "{logs:?}");
    assert!(logs.contains(&"stage2-loss.tsv".to_string()), "{logs:?}");
    for r in &runs {
        let manifest = std::fs::read_to_string(r.join("manifest")).unwrap();
        assert!(manifest.contains("# input_hash"), "{manifest}");
    }

    let report = run(&["evaluate", "--setting", "paired", "--n-r", "0", "--steps", "2"]);
    assert!(report.contains("fid="), "{report}");
    assert!(report.contains("lpips="), "{report}");
    assert!(!report.contains("clip_i="), "{report}");
    let report = run(&["evaluate", "--setting", "paired", "--n-r", "3", "--steps", "2"]);
    assert!(report.contains("clip_i="), "{report}");

    let table = run(&["ablate", "--steps", "1"]);
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 12, "{table}");
}
