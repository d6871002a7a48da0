use std::path::Path;
use std::process::{Command, Output};

fn otke(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otke")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small synthetic dataset plus an unsupervised checkpoint.
fn fixture(dir: &Path, dim: &str) -> (String, String) {
    let data = dir.join("data");
    let out = otke(&[
        "synth",
        "--out",
        &s(&data),
        "--classes",
        "3",
        "--dim",
        dim,
        "--seed",
        "5",
        "--train-size",
        "60",
        "--val-size",
        "20",
        "--test-size",
        "15",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = dir.join("model.ckpt");
    let out = otke(&[
        "fit",
        "--mode",
        "unsup",
        "--train",
        &s(&data.join("train.jsonl")),
        "--val",
        &s(&data.join("val.jsonl")),
        "--out",
        &s(&ckpt),
        "--k",
        "8",
        "--p",
        "4",
        "--kernel",
        "linear",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (s(&data), s(&ckpt))
}

#[test]
fn synth_writes_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = otke(&[
            "synth",
            "--classes",
            "5",
            "--seed",
            "7",
            "--out",
            &s(d),
            "--train-size",
            "30",
            "--val-size",
            "10",
            "--test-size",
            "10",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(stdout(&out).trim(), "synth m=50 C=5 seed=7");
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2() {
    let out = otke(&["synth", "--classes", "5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--out"));

    let dir = tempfile::tempdir().unwrap();
    let out = otke(&["synth", "--classes", "0", "--out", &s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("classes"), "{}", stderr(&out));

    let out = otke(&["synth", "--out", &s(dir.path()), "--set", "no_such_key=1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no_such_key"));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = otke(&[
        "fit",
        "--mode",
        "unsup",
        "--train",
        &s(&dir.path().join("absent.jsonl")),
        "--out",
        &s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn fit_embed_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path(), "6");
    let test = format!("{data}/test.jsonl");

    let e1 = s(&dir.path().join("e1.csv"));
    let e2 = s(&dir.path().join("e2.csv"));
    for e in [&e1, &e2] {
        let out = otke(&["embed", "--model", &ckpt, "--data", &test, "--out", e]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let text = std::fs::read_to_string(&e1).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert!(text.lines().all(|l| l.split(',').count() == 4 * 8));
    assert_eq!(text, std::fs::read_to_string(&e2).unwrap());

    let sup = s(&dir.path().join("sup.ckpt"));
    let out = otke(&[
        "fit",
        "--mode",
        "sup",
        "--init",
        &ckpt,
        "--train",
        &format!("{data}/train.jsonl"),
        "--val",
        &format!("{data}/val.jsonl"),
        "--test",
        &test,
        "--out",
        &sup,
        "--epochs",
        "2",
        "--k",
        "8",
        "--p",
        "4",
        "--kernel",
        "linear",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    assert!(text.lines().any(|l| l.starts_with("final val_acc=") && l.contains("test_top1=")));

    let out = otke(&["evaluate", "--model", &sup, "--data", &test, "--topk", "1,2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("top1="));
    assert!(stdout(&out).contains("top2="));
}

#[test]
fn dimension_mismatch_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = fixture(dir.path(), "6");
    let other = dir.path().join("other");
    let out =
        otke(&["synth", "--out", &s(&other), "--dim", "7", "--train-size", "5", "--val-size", "5", "--test-size", "5"]);
    assert_eq!(code(&out), 0);
    let out = otke(&[
        "embed",
        "--model",
        &ckpt,
        "--data",
        &s(&other.join("test.jsonl")),
        "--out",
        &s(&dir.path().join("e.csv")),
    ]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn gram_reports_solves_and_guards_size() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path(), "4");
    let val = format!("{data}/val.jsonl");
    let csv = dir.path().join("g.csv");
    let out = otke(&["gram", "--data", &val, "--kind", "k_z", "--model", &ckpt, "--out", &s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out);
    assert!(line.contains("kind=k_z m=20 solves=20"), "{line}");
    assert!(line.contains("min_eigenvalue="));
    assert!(csv.exists());

    let out = otke(&["gram", "--data", &val, "--kind", "k_ot", "--p", "4", "--out", &s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("cross_solves=190"), "{}", stdout(&out));

    let big = dir.path().join("big");
    let out = otke(&[
        "synth",
        "--out",
        &s(&big),
        "--dim",
        "2",
        "--train-size",
        "2001",
        "--val-size",
        "1",
        "--test-size",
        "1",
    ]);
    assert_eq!(code(&out), 0);
    let out = otke(&["gram", "--data", &s(&big.join("train.jsonl")), "--kind", "k_ot", "--out", &s(&csv)]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
}

#[test]
fn check_suites() {
    let out = otke(&["check", "--suite", "lemma1", "--trials", "100"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("PASS suite=lemma1"));
    assert!(text.contains("pair_violations=0"));

    let out = otke(&["check", "--suite", "gradcheck"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("max_rel_error="));

    let out = otke(&["check", "--suite", "nope"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn default_check_runs_every_suite() {
    let out = otke(&["check"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("PASS suite=")).count(), 6);
}
