use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sslforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslforge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("SSLFORGE_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sslforge(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "data/config.json"];
    v.extend_from_slice(rest);
    v
}

/// Small corpus plus a config shrunk to a fast model.
fn corpus(dir: &Path) {
    ok(
        dir,
        &[
            "--seed", "4", "gen-synthetic", "--out", "data", "--labeled", "40", "--unlabeled", "100",
            "--dev", "30", "--test", "40", "--background", "60",
        ],
    );
    let path = dir.join("data/config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["ssl"]["emb_dim"] = 6.into();
    cfg["ssl"]["hidden"] = 4.into();
    cfg["ssl"]["epochs"] = 2.into();
    cfg["ssl"]["batch_size"] = 8.into();
    cfg["stage1"]["epochs"] = 2.into();
    cfg["stage2"]["min_count"] = 1.into();
    cfg["stage2"]["committee_n"] = 2.into();
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn gen_synthetic_writes_every_split() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    for f in ["labeled", "pool", "pool_gold", "dev", "test", "background"] {
        let text = fs::read_to_string(tmp.path().join(format!("data/{f}.jsonl"))).unwrap();
        assert!(!text.is_empty(), "{f}");
    }
    let n = fs::read_to_string(tmp.path().join("data/labeled.jsonl")).unwrap().lines().count();
    assert_eq!(n, 40);
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    let text = ok(
        tmp.path(),
        &["--config", "data/config.json", "--method", "kd", "--method", "submodular", "--budget", "30", "run"],
    );
    assert!(text.contains("KD"), "{text}");
    let run = tmp.path().join("data/run");
    for f in ["manifest.json", "metrics.json", "report.txt", "seed-4/stage2/selection.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let again = ok(tmp.path(), &["report", "data/run"]);
    assert_eq!(again, text);
    let csv = ok(tmp.path(), &["report", "--csv", "data/run"]);
    assert!(csv.lines().count() >= 2);
}

#[test]
fn stages_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());

    ok(tmp.path(), &with(&["filter-domain", "--out", "s1"]));
    let kept = fs::read_to_string(tmp.path().join("s1/pool.jsonl")).unwrap().lines().count();
    assert!(kept <= 100);

    ok(
        tmp.path(),
        &with(&["--method", "committee", "--budget", "10", "select", "--pool", "s1/pool.jsonl", "--out", "s2/sel.jsonl", "--out-data", "s2/data.jsonl"]),
    );
    let sel = fs::read_to_string(tmp.path().join("s2/sel.jsonl")).unwrap().lines().count();
    assert!(sel <= 10.min(kept));
    assert!(tmp.path().join("s2/committee/thresholds.json").exists());

    ok(tmp.path(), &with(&["--method", "vat", "train", "--unlabeled", "s2/data.jsonl", "--out", "m"]));
    assert!(tmp.path().join("m/model.bin").exists());
    assert!(tmp.path().join("m/epochs.csv").exists());

    ok(tmp.path(), &with(&["evaluate", "--model", "m/model.bin", "--out", "m/metrics.json"]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("m/metrics.json")).unwrap()).unwrap();
    let e = m["ic_error"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&e));
}

#[test]
fn zero_budget_selects_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    ok(
        tmp.path(),
        &["--config", "data/config.json", "--method", "submodular", "--budget", "0", "select", "--out", "sel.jsonl"],
    );
    assert_eq!(fs::read_to_string(tmp.path().join("sel.jsonl")).unwrap().trim(), "");
}

#[test]
fn sweep_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    ok(
        tmp.path(),
        &["--config", "data/config.json", "--method", "pl", "sweep-pool-size", "0", "20", "--out", "sweep.csv"],
    );
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn usage_and_input_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_flag = sslforge(tmp.path(), &["run", "--no-such-flag"]);
    assert!(!bad_flag.status.success());

    let bad_method = sslforge(tmp.path(), &["--method", "magic", "run"]);
    assert!(!bad_method.status.success());
    assert!(String::from_utf8_lossy(&bad_method.stderr).contains("unknown method"));

    let missing = sslforge(tmp.path(), &["evaluate", "--model", "nope.bin", "--test", "nope.jsonl"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.bin"));

    corpus(tmp.path());
    let over = sslforge(
        tmp.path(),
        &["--config", "data/config.json", "--method", "kd", "--budget", "100000", "run"],
    );
    assert!(!over.status.success());
    assert!(String::from_utf8_lossy(&over.stderr).contains("stage `stage2` failed"));
}
