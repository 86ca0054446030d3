#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use seqdistill::filters::TokenCounter;
use seqdistill::gateway::{GatewayError, TokenCount};

/// Counts characters, like the mock backend's tokenizer.
pub struct CharCounter;

impl TokenCounter for CharCounter {
    fn count(&self, text: &str) -> Result<TokenCount, GatewayError> {
        Ok(TokenCount {
            count: text.chars().count(),
            approximate: false,
        })
    }
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seqdistill")
}

/// Writes `dir/config.toml` with relative questions and work paths.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    let body = format!("seed = 7\n\n[paths]\nquestions = \"questions.jsonl\"\nwork_dir = \"work\"\n{extra}");
    fs::write(&path, body).unwrap();
    path
}

pub fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn run_ok(config: &Path, args: &[&str]) {
    let out = run(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Non-empty lines in a file.
pub fn lines(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}

pub const E2E_COMMANDS: [&str; 7] = [
    "sample",
    "filter",
    "score",
    "classify",
    "select",
    "build-stages",
    "mixed-policy",
];

/// Runs the mock pipeline on `questions` generated questions; returns the wall time.
pub fn run_e2e(dir: &Path, questions: usize) -> Result<Duration, String> {
    let config = write_config(dir, "");
    let start = Instant::now();
    let count = questions.to_string();
    let mut steps: Vec<Vec<&str>> = vec![vec!["mock-questions", "--count", &count]];
    steps.extend(E2E_COMMANDS.iter().map(|c| vec!["--mock", *c]));
    for args in steps {
        let out = run(&config, &args);
        if !out.status.success() {
            return Err(format!(
                "{args:?} exited with {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(start.elapsed())
}

/// Relative path and contents of every file under `dir`, sorted by path.
pub fn snapshot_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
