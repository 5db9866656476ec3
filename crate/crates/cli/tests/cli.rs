use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn darc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darc"))
        .args(args)
        .env_remove("DARC_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = darc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a briefly trained base model.
fn prepare(dir: &Path) {
    let data = dir.join("data");
    ok(&[
        "gen",
        "--n",
        "240",
        "--teacher",
        "pw1x1",
        "--width",
        "4",
        "--layers",
        "1",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    ok(&[
        "init",
        "--data",
        p(&data.join("dataset.darcd")),
        "--body",
        "full3x3",
        "--width",
        "4",
        "--epochs",
        "2",
        "--out",
        p(&dir.join("base")),
    ]);
}

fn compress_args<'a>(dir: &'a Path, run: &'a str) -> Vec<String> {
    [
        "compress",
        "--model",
        p(&dir.join("base/model")),
        "--data",
        p(&dir.join("data/dataset.darcd")),
        "--block-epochs",
        "1",
        "--fine-tune-epochs",
        "1",
        "--mimic-steps",
        "20",
        "--run",
        p(&dir.join(run)),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_compress(dir: &Path, run: &str, extra: &[&str]) -> Output {
    let mut args = compress_args(dir, run);
    args.extend(extra.iter().map(|s| s.to_string()));
    darc(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(darc(&["gen", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(darc(&[]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = darc(&[
        "compress",
        "--model",
        p(&missing),
        "--data",
        p(&missing),
        "--run",
        p(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = darc(&["rademacher", "--n", "0"]);
    assert_eq!(out.status.code(), Some(3));

    prepare(dir.path());
    let out = run_compress(dir.path(), "tiny", &["--budget", "1"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let out = run_compress(dir.path(), "div", &["--eta0", "1e30", "--lambda0", "1"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn compress_is_reproducible_and_eval_matches_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    for run in ["a", "b"] {
        let out = run_compress(dir.path(), run, &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let log = |run: &str| fs::read_to_string(dir.path().join(run).join("log.jsonl")).unwrap();
    assert!(!log("a").is_empty());
    assert_eq!(log("a"), log("b"));

    let snaps = dir.path().join("a/snapshots");
    let mut checked = 0;
    for entry in fs::read_dir(&snaps).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("metrics") {
            continue;
        }
        let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let model = path.with_extension("model");
        let eval: serde_json::Value = serde_json::from_str(&ok(&[
            "eval",
            "--model",
            p(&model),
            "--data",
            p(&dir.path().join("data/dataset.darcd")),
        ]))
        .unwrap();
        let stored = &record["metrics"];
        assert_eq!(eval["samples"], stored["samples"]);
        assert_eq!(eval["top1"], stored["top1"]);
        let (a, b) = (
            eval["mean_loss"].as_f64().unwrap(),
            stored["mean_loss"].as_f64().unwrap(),
        );
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        assert_eq!(eval["size_bytes"], stored["size_bytes"]);
        checked += 1;
    }
    assert!(checked > 0);

    let exported = dir.path().join("last.model");
    ok(&["export", "--run", p(&dir.path().join("a")), "--out", p(&exported)]);
    assert!(exported.is_file());
    let out = ok(&["bench", "--model", p(&exported), "--bench-reps", "3"]);
    assert!(out.starts_with("median "), "{out}");
}

#[test]
fn seed_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |out: &str, seed: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_darc"));
        cmd.args([
            "gen",
            "--n",
            "50",
            "--seed",
            seed,
            "--out",
            p(&dir.path().join(out)),
        ]);
        match env {
            Some(v) => cmd.env("DARC_SEED", v),
            None => cmd.env_remove("DARC_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.path().join(out).join("dataset.darcd")).unwrap()
    };
    assert_eq!(gen("x", "1", Some("9")), gen("y", "9", None));
    assert_ne!(gen("z", "1", None), gen("y2", "9", None));
}

#[test]
fn rademacher_reports_estimate() {
    let out = ok(&["rademacher", "--fixture", "zero", "--n", "4", "--draws", "100"]);
    assert!(out.contains("estimate=0.000000 stderr=0.000000"), "{out}");
    let out = ok(&[
        "rademacher",
        "--fixture",
        "constants",
        "--n",
        "4",
        "--draws",
        "100",
    ]);
    let est: f64 = out
        .split("estimate=")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(est > 0.0 && est <= 1.0, "{out}");
}
