mod common;

use std::fs;
use std::process::Command;

use seqdistill::corpus::{self, ResponseRecord};
use seqdistill::filters::RejectionReport;

fn code(out: &std::process::Output) -> Option<i32> {
    out.status.code()
}

fn csv_rows(path: &std::path::Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn help_and_usage_errors() {
    let help = Command::new(common::bin()).arg("--help").output().unwrap();
    assert_eq!(code(&help), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["sample", "score", "classify", "select", "filter", "build-stages", "mixed-policy", "analyze", "oracle"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    let unknown = Command::new(common::bin()).arg("frobnicate").output().unwrap();
    assert_eq!(code(&unknown), Some(1));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "\n[divergence]\ntau = -1.0\n");
    let out = common::run(&config, &["--mock", "sample"]);
    assert_eq!(code(&out), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    let config = common::write_config(dir.path(), "\n[sampling]\nbogus_key = 3\n");
    assert_eq!(code(&common::run(&config, &["--mock", "sample"])), Some(1));

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&common::run(&missing, &["--mock", "sample"])), Some(1));
}

#[test]
fn missing_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "");
    let out = common::run(&config, &["--mock", "sample"]);
    assert_eq!(code(&out), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    common::run_ok(&config, &["mock-questions", "--count", "2"]);
    // score before sample has nothing to read
    let out = common::run(&config, &["--mock", "score"]);
    assert_eq!(code(&out), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn held_lock_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "");
    common::run_ok(&config, &["mock-questions", "--count", "2"]);
    fs::create_dir_all(dir.path().join("work")).unwrap();
    let lock = dir.path().join("work/.seqdistill.lock");
    fs::write(&lock, "").unwrap();
    let out = common::run(&config, &["--mock", "sample"]);
    assert_eq!(code(&out), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    fs::remove_file(&lock).unwrap();
    common::run_ok(&config, &["--mock", "sample"]);
    assert!(!lock.exists(), "lock left behind");
}

#[test]
fn oracle_reports_two_sequence_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "");
    common::run_ok(&config, &["oracle"]);
    let rows = csv_rows(&dir.path().join("work/oracle_kl.csv"));
    assert_eq!(rows[0], ["teacher", "student", "kl", "ce", "entropy", "mc_sft_loss", "samples", "seed"]);
    let field = |name: &str| -> f64 { rows[1][rows[0].iter().position(|h| h == name).unwrap()].parse().unwrap() };
    let expected_kl = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
    assert!((field("kl") - expected_kl).abs() < 1e-12);
    assert!((field("ce") - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((field("mc_sft_loss") - std::f64::consts::LN_2).abs() < 1e-2);

    let cov = csv_rows(&dir.path().join("work/oracle_coverage.csv"));
    let at = |t: &str| -> f64 { cov.iter().find(|r| r[1] == t).unwrap()[5].parse().unwrap() };
    assert!(at("1") - at("0.6") >= 0.05, "coverage rows {cov:?}");
}

#[test]
fn filter_on_planted_defects() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "");
    fs::copy(common::fixture("defect_questions.jsonl"), dir.path().join("questions.jsonl")).unwrap();
    fs::create_dir_all(dir.path().join("work")).unwrap();
    fs::copy(common::fixture("defect_pool.jsonl"), dir.path().join("work/pool_low.jsonl")).unwrap();
    common::run_ok(&config, &["--mock", "--single-stage", "--verbose", "filter"]);

    let reports: Vec<RejectionReport> =
        corpus::read_records(&dir.path().join("work/rejection_report_low.jsonl")).unwrap();
    let mut counts: Vec<(&str, usize)> =
        reports[0].reasons.nonzero().into_iter().map(|(r, n)| (r.as_str(), n)).collect();
    counts.sort();
    assert_eq!(counts, [("function_call", 1), ("repetition_ngram", 1), ("too_long", 1)]);
    assert_eq!(common::lines(&dir.path().join("work/kept_low.jsonl")), 17);
    assert_eq!(common::lines(&dir.path().join("work/verdicts_low.jsonl")), 20);
    let kept: Vec<ResponseRecord> = corpus::read_records(&dir.path().join("work/kept_low.jsonl")).unwrap();
    for bad in ["d05", "d11", "d17"] {
        assert!(kept.iter().all(|r| r.question_id != bad), "{bad} kept");
    }
    // harmony markup is normalized on the way through
    assert!(kept.iter().all(|r| r.text.starts_with("<think>") && !r.text.contains("<|")));
}

#[test]
fn snapshot_config_reproduces_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_config(dir.path(), "");
    common::run_ok(&config, &["mock-questions", "--count", "4"]);
    common::run_ok(&config, &["--mock", "--seed", "99", "sample"]);
    let work = dir.path().join("work");
    let first = fs::read(work.join("pool_low.jsonl")).unwrap();
    let snapshot = work.join("sample.config.toml");
    assert!(fs::read_to_string(&snapshot).unwrap().contains("seed = 99"));

    let moved = dir.path().join("replay.toml");
    fs::rename(&snapshot, &moved).unwrap();
    fs::remove_file(work.join("pool_low.jsonl")).unwrap();
    common::run_ok(&moved, &["--mock", "sample"]);
    assert_eq!(fs::read(work.join("pool_low.jsonl")).unwrap(), first);

    // a different seed gives a different pool
    common::run_ok(&config, &["--mock", "sample"]);
    assert_ne!(fs::read(work.join("pool_low.jsonl")).unwrap(), first);
}

#[test]
fn full_mock_run_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    common::run_e2e(dir.path(), 30).unwrap();
    let config = dir.path().join("config.toml");
    common::run_ok(&config, &["--mock", "analyze"]);
    let work = dir.path().join("work");

    let rows = csv_rows(&work.join("likelihood_summary.csv"));
    assert_eq!(rows[0], ["pool", "model", "count", "mean", "iqr"]);
    let iqr = |pool: &str| -> f64 {
        rows.iter().find(|r| r[0] == pool && r[1] == "teacher").unwrap()[4].parse().unwrap()
    };
    // the teacher's geomeans are more concentrated at the lower temperature
    assert!(iqr("low") < iqr("high"), "{rows:?}");

    let profile = csv_rows(&work.join("profile.csv"));
    assert_eq!(profile[0], ["position", "type", "side", "fraction", "support"]);
    let delta = csv_rows(&work.join("delta.csv"));
    assert_eq!(delta[0], ["type", "delta"]);
    assert_eq!(delta.len(), 5);
    assert!(work.join("cutoff_table.csv").is_file());
    for pool in ["low", "high"] {
        for model in ["teacher", "student", "distilled"] {
            assert!(work.join(format!("likelihood_{pool}_{model}.csv")).is_file());
        }
    }
}
