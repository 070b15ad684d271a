//! Drives the `mlmlab` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mlmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlmlab"))
        .args(args)
        .env_remove("MLMLAB_SEED")
        .output()
        .expect("spawn mlmlab")
}

fn ok(args: &[&str]) -> String {
    let out = mlmlab(args);
    assert!(
        out.status.success(),
        "mlmlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture_vocab() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/byte-bpe-50k.json")
}

/// Every file under `dir`, relative path and contents, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn flops_paper_preset() {
    let stdout = ok(&["flops", "--preset", "paper", "--objective", "mlm", "--objective", "firstchar29"]);
    let fc = stdout.lines().find(|l| l.contains("firstchar29")).expect(&stdout);
    let pct: f64 = fc
        .split_whitespace()
        .find_map(|w| w.strip_suffix('%').and_then(|x| x.parse().ok()))
        .expect(fc);
    assert!((pct + 31.0).abs() <= 3.0, "{fc}");
}

#[test]
fn labelmap_first_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let vocab = fixture_vocab();
    assert_eq!(ok(&["labelmap", "--vocab", s(&vocab), "--objective", "first:1", "--out", s(&a)]).trim(), "256");
    ok(&["labelmap", "--vocab", s(&vocab), "--objective", "first:1", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn repeated_pipeline_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.txt");
    let vocab = d.join("vocab");
    let task = d.join("task.tsv");
    let eval = d.join("eval.tsv");
    ok(&["synth", "corpus", "--docs", "200", "--out", s(&corpus)]);
    ok(&["tokenize", "train", "--corpus", s(&corpus), "--vocab-size", "320", "--out", s(&vocab)]);
    ok(&["synth", "task", "--kind", "classification", "--size", "40", "--vocab", s(&vocab), "--out", s(&task)]);
    ok(&["synth", "task", "--kind", "classification", "--size", "40", "--seed", "2", "--vocab", s(&vocab), "--out", s(&eval)]);

    // same inputs, same output directory: the second run must rewrite identical bytes
    let out = d.join("run");
    let mut snaps = Vec::new();
    for _ in 0..2 {
        if out.exists() {
            std::fs::remove_dir_all(&out).unwrap();
        }
        let pre = out.join("pre");
        ok(&[
            "pretrain", "--objective", "first:2", "--corpus", s(&corpus), "--vocab", s(&vocab), "--out", s(&pre),
            "--set", "total_steps=4", "--set", "warmup_steps=1", "--set", "seq_len=32", "--set", "batch_size=4",
            "--set", "checkpoint_every=2",
        ]);
        ok(&[
            "finetune", "--checkpoint", s(&pre.join("checkpoint.bin")), "--vocab", s(&vocab), "--task", s(&task),
            "--eval", s(&eval), "--kind", "classification", "--out", s(&out.join("ft")), "--set", "seeds=2",
            "--set", "max_epochs=1",
        ]);
        ok(&["flops", "--preset", "desk", "--vocab", s(&vocab), "--out", s(&out.join("flops.csv"))]);
        ok(&["sweep", "classes", "--vocab", s(&vocab), "--n", "1..4", "--out", s(&out.join("sweep"))]);
        ok(&["analyze", "--results", s(&out), "--out", s(&out.join("analysis"))]);
        snaps.push(snapshot(&out));
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    assert_eq!(a.iter().map(|x| &x.0).collect::<Vec<_>>(), b.iter().map(|x| &x.0).collect::<Vec<_>>());
    for ((p, x), (_, y)) in a.iter().zip(b) {
        assert!(x == y, "{} differs between runs", p.display());
    }
    assert!(a.iter().any(|(p, _)| p.ends_with("checkpoint-000002.bin")));
}

#[test]
fn bad_setting_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "objective = mlm\npeak_lr = fast\n").unwrap();
    let out = mlmlab(&["pretrain", "--config", s(&cfg), "--corpus", "x", "--vocab", "y", "--out", "z"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("peak_lr") && err.contains("run.conf:2"), "{err}");

    std::fs::write(&cfg, "objective = mlm\nlearning_rate = 1\n").unwrap();
    let out = mlmlab(&["pretrain", "--config", s(&cfg)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = mlmlab(&["labelmap", "--vocab", s(&fixture_vocab()), "--objective", "first:0", "--out", "unused.csv"]);
    assert!(!out.status.success());
}
