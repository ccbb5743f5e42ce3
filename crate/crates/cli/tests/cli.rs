use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn alc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn alc")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

const TINY_CONFIG: &str = "\
# small enough for a test
epochs = 2
batch_size = 8
dim = 8
d_in = 16
buckets = 1024
blocking_size = 3
seed = 3
";

/// Generates a small catalog and trains on it; returns (data dir, out dir).
fn trained(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    let out = root.join("run");
    let o = alc(&[
        "generate-data",
        "--out",
        p(&data),
        "--num-labels",
        "30",
        "--num-queries",
        "60",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = root.join("run.conf");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = alc(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (data, out)
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data");
    let o = alc(&["generate-data", "--out", p(&out), "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(alc(&[]).status.code(), Some(1));
    assert_eq!(alc(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = alc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = TempDir::new().unwrap();
    let o = alc(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("nope.alc")),
        "--data",
        p(dir.path()),
        "--target-precision",
        "0.85",
        "--report",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("r.json").exists());
}

fn verdict(stdout: &str) -> (f64, bool) {
    let last = stdout.lines().last().expect("summary line");
    let err = last
        .strip_prefix("max relative error ")
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected summary `{last}`"));
    (err, last.ends_with("ok"))
}

#[test]
fn gradcheck_exit_status_follows_the_printed_verdict() {
    for seed in ["0", "7"] {
        let o = alc(&["gradcheck", "--seed", seed, "--tol", "1e-4"]);
        let stdout = String::from_utf8_lossy(&o.stdout);
        let (err, ok) = verdict(&stdout);
        assert_eq!(ok, err <= 1e-4, "{stdout}");
        assert_eq!(o.status.code(), Some(if ok { 0 } else { 2 }), "{stdout}");
    }
    let o = alc(&["gradcheck", "--seed", "0", "--tol", "1e-4"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_tolerance_is_validated() {
    assert_eq!(alc(&["gradcheck", "--tol", "0"]).status.code(), Some(2));
    assert_eq!(alc(&["gradcheck", "--tol", "1e-14"]).status.code(), Some(2));
}

#[test]
fn generate_from_spec_file_matches_flags() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.conf");
    fs::write(
        &spec,
        "num_labels = 30\nnum_train_queries = 60\nnum_test_queries = 15\nseed = 5\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(alc(&["generate-data", "--out", p(&a), "--spec", p(&spec)])
        .status
        .success());
    assert!(alc(&[
        "generate-data",
        "--out",
        p(&b),
        "--num-labels",
        "30",
        "--num-queries",
        "60",
        "--seed",
        "5"
    ])
    .status
    .success());
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn train_then_eval_is_reproducible_and_leaves_inputs_alone() {
    let dir = TempDir::new().unwrap();
    let (data, run) = trained(dir.path());
    let before = tree(&data);
    for f in ["checkpoint.alc", "train_log.jsonl", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let ckpt = run.join("checkpoint.alc");
    let eval = |name: &str| {
        let report = dir.path().join(format!("{name}.json"));
        let scores = dir.path().join(format!("{name}.tsv"));
        let o = alc(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--target-precision",
            "0.85",
            "--report",
            p(&report),
            "--scores",
            p(&scores),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read_to_string(report).unwrap(), scores)
    };
    let (r1, scores) = eval("r1");
    let (r2, _) = eval("r2");
    assert_eq!(r1, r2);
    let v: serde_json::Value = serde_json::from_str(&r1).unwrap();
    for key in [
        "p_at_1",
        "c_at_1",
        "threshold",
        "target_precision",
        "histogram",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(tree(&data), before);

    // retraining from the same config gives the same checkpoint
    let cfg = dir.path().join("run.conf");
    let again = dir.path().join("again");
    assert!(alc(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&again)
    ])
    .status
    .success());
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(again.join("checkpoint.alc")).unwrap()
    );

    // histogram rebuilt from the scores file matches the report's
    let hist = dir.path().join("hist.json");
    let o = alc(&[
        "histogram",
        "--scores",
        p(&scores),
        "--bins",
        "50",
        "--out",
        p(&hist),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let h: serde_json::Value = serde_json::from_str(&fs::read_to_string(hist).unwrap()).unwrap();
    assert_eq!(h, v["histogram"]);
}

#[test]
fn calibration_on_train_split() {
    let dir = TempDir::new().unwrap();
    let (data, run) = trained(dir.path());
    let report = dir.path().join("cal.json");
    let o = alc(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint.alc")),
        "--data",
        p(&data),
        "--target-precision",
        "0.5",
        "--report",
        p(&report),
        "--calibration-split",
        "train",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    let c = v["c_at_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
}

#[test]
fn train_without_data_dir_fails_at_runtime() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = alc(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "epochs = 1\nlearning_rte = 0.1\n").unwrap();
    let o = alc(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(dir.path()),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rte"));
    assert!(!dir.path().join("o").exists());
}
