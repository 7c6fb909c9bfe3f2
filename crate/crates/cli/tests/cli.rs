use std::path::Path;
use std::process::{Command, Output};

use curate_core::synthetic;

const BIN: &str = env!("CARGO_BIN_EXE_curate");

fn workspace(n: usize, scorer: Option<&str>, extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    synthetic::write_corpus(&synthetic::corpus(n, 4), &dir.path().join("pool.jsonl")).unwrap();
    synthetic::write_seed_file(&synthetic::seed_set(6, 9), &dir.path().join("seed.jsonl")).unwrap();
    let scorer = scorer.map(|u| format!("[scorer]\nbase_url = \"{u}\"\n")).unwrap_or_default();
    std::fs::write(
        dir.path().join("curate.toml"),
        format!(
            "output_dir = \"out\"\n[[inputs]]\npath = \"pool.jsonl\"\n{scorer}\
             [classifier]\nseed_set = \"seed.jsonl\"\n[selection]\nstrategy = \"combination_pp\"\nm = 21\nseed = 3\n{extra}"
        ),
    )
    .unwrap();
    dir
}

fn curate(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("CURATE_SCORER_URL")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_twice_hits_the_cache() {
    let dir = workspace(120, Some("mock://"), "");
    let first = curate(dir.path(), &["run"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(!stdout(&first).contains("cached"));
    let rows = std::fs::read_to_string(dir.path().join("out/selection.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 22);

    let second = curate(dir.path(), &["run"]);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(stdout(&second).matches("cached").count(), 6);
}

#[test]
fn stages_run_individually_and_report_missing_upstream() {
    let dir = workspace(40, Some("mock://"), "");
    let early = curate(dir.path(), &["sample"]);
    assert_eq!(early.status.code(), Some(2));
    assert!(stderr(&early).contains("curate ingest"), "{}", stderr(&early));

    for s in ["ingest", "classify", "score", "normalize", "sample", "report"] {
        let o = curate(dir.path(), &[s]);
        assert_eq!(o.status.code(), Some(0), "{s}: {}", stderr(&o));
    }
    assert!(dir.path().join("out/report.json").is_file());
}

#[test]
fn flags_override_the_file() {
    let dir = workspace(60, Some("mock://"), "");
    let o = curate(dir.path(), &["run", "--seed", "99", "-m", "14", "--strategy", "random", "--output-dir", "alt"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("alt/selection.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 99);
    assert_eq!(header["m"], 14);
    assert_eq!(header["strategy"], "random");
    assert_eq!(text.lines().count(), 15);
}

#[test]
fn scorer_url_can_come_from_the_environment() {
    let dir = workspace(30, None, "");
    let missing = curate(dir.path(), &["run"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("CURATE_SCORER_URL"));
    let o = Command::new(BIN)
        .arg("run")
        .current_dir(dir.path())
        .env("CURATE_SCORER_URL", "mock://")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn validate_fills_defaults_and_lists_errors() {
    let dir = workspace(5, Some("mock://"), "");
    let ok = curate(dir.path(), &["validate"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let out = stdout(&ok);
    assert!(out.contains("\"gamma\": 75.0"), "{out}");
    assert!(out.contains("most_frequent"), "{out}");
    assert!(out.contains("config_digest"));

    let bad = workspace(5, Some("mock://"), "gamma = 150\n[selection.quotas]\nmath = 5\n");
    let o = curate(bad.path(), &["validate", "--strategy", "best"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("selection.strategy") && err.contains("combination_pp"), "{err}");
    assert!(err.contains("selection.gamma"), "{err}");
    assert!(err.contains("selection.quotas"), "{err}");
}

#[test]
fn excess_rejects_exit_with_one() {
    let dir = workspace(20, Some("mock://"), "");
    let pool = dir.path().join("pool.jsonl");
    let mut text = std::fs::read_to_string(&pool).unwrap();
    text.push_str("not json\n");
    std::fs::write(&pool, text).unwrap();
    let ingest = curate(dir.path(), &["ingest"]);
    assert_eq!(ingest.status.code(), Some(1), "{}", stderr(&ingest));
    assert!(stdout(&ingest).contains("rejected 1"));
    let run = curate(dir.path(), &["run"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(!dir.path().join("out/selection.jsonl").exists());
}

#[test]
fn skew_keeps_two_categories_whole() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for (c, l) in synthetic::labeled_corpus(700, 1) {
        let mut v = serde_json::to_value(&c).unwrap();
        v["category"] = serde_json::to_value(l).unwrap();
        lines.push_str(&format!("{v}\n"));
    }
    std::fs::write(dir.path().join("pool.jsonl"), lines).unwrap();
    let o = curate(dir.path(), &["skew", "--corpus", "pool.jsonl", "--seed", "5", "--out", "skewed.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("whole categories"));
    let kept = std::fs::read_to_string(dir.path().join("skewed.jsonl")).unwrap().lines().count();
    assert!(kept > 150 && kept < 400, "{kept}");

    let unlabeled = workspace(10, None, "");
    let o = curate(unlabeled.path(), &["skew", "--corpus", "pool.jsonl", "--seed", "5", "--out", "s.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("labels"));
}

#[test]
fn difficulty_targets_from_a_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for (model, vals) in [("a", [1.0, 0.0, 0.0]), ("b", [1.0, 1.0, 0.0])] {
        for (i, v) in vals.iter().enumerate() {
            lines.push_str(&format!(
                "{{\"item_id\":\"i{i}\",\"dataset\":\"d\",\"model\":\"{model}\",\"metric\":\"acc\",\"value\":{v}}}\n"
            ));
        }
    }
    std::fs::write(dir.path().join("m.jsonl"), lines).unwrap();
    let o = curate(dir.path(), &["difficulty-targets", "--matrix", "m.jsonl", "--out", "t.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 2 targets"));
    let t = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert!(t.contains("\"i0\"") && !t.contains("\"i2\""));
}
