mod common;

use std::fs;
use std::sync::Arc;

use seqdistill::corpus::ModelRole;
use seqdistill::gateway::http::{HttpBackend, HttpConfig};
use seqdistill::gateway::mock::{MockBackend, MockSuiteIds};
use seqdistill::gateway::server::{MockServer, MockServerOptions};
use seqdistill::gateway::{Gateway, GatewayError, GenerationRequest, SampleJob, ScoringRequest};

fn suite() -> MockBackend {
    MockBackend::standard(MockSuiteIds {
        teacher: "teacher",
        student: "student",
        distilled: "distilled",
    })
}

fn client(server: &MockServer, max_attempts: u32) -> Gateway {
    let mut cfg = HttpConfig::new(server.base_url());
    cfg.max_attempts = max_attempts;
    cfg.initial_backoff_ms = 1;
    Gateway::new(Arc::new(HttpBackend::new(cfg)), 4)
}

fn job(model: &str) -> SampleJob {
    SampleJob {
        question_id: "q0".into(),
        role: ModelRole::Teacher,
        request: GenerationRequest {
            model_id: model.into(),
            prompt: "Problem 0: find the digit.".into(),
            temperature: 0.6,
            top_p: 1.0,
            max_tokens: 400,
            n: 3,
            seed: Some(42),
        },
    }
}

fn scoring() -> ScoringRequest {
    ScoringRequest {
        model_id: "student".into(),
        prompt: "Problem 0: find the digit.".into(),
        completion: "<think>the digit is 3.</think>\\boxed{3}".into(),
    }
}

#[test]
fn http_matches_in_process_backend() {
    let server = MockServer::start(suite(), MockServerOptions::default()).unwrap();
    let remote = client(&server, 1);
    let local = Gateway::new(Arc::new(suite()), 4);
    assert_eq!(remote.sample(&job("teacher")).unwrap(), local.sample(&job("teacher")).unwrap());
    let (a, b) = (remote.score(&scoring()).unwrap(), local.score(&scoring()).unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.char_start, x.char_end, &x.text), (y.char_start, y.char_end, &y.text));
        assert!((x.logprob - y.logprob).abs() < 1e-9);
    }
    let text = "count these characters";
    assert_eq!(remote.count_tokens("student", text).unwrap(), local.count_tokens("student", text).unwrap());
}

#[test]
fn transient_failures_are_retried() {
    let opts = MockServerOptions {
        fail_first: 2,
        ..Default::default()
    };
    let server = MockServer::start(suite(), opts).unwrap();
    let records = client(&server, 3).sample(&job("teacher")).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(server.request_count(), 3);
}

#[test]
fn retries_give_up_with_transport_error() {
    let opts = MockServerOptions {
        fail_first: 10,
        ..Default::default()
    };
    let server = MockServer::start(suite(), opts).unwrap();
    let err = client(&server, 2).sample(&job("teacher")).unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err:?}");
    assert_eq!(server.request_count(), 2);
}

#[test]
fn missing_endpoints_are_capability_errors() {
    let opts = MockServerOptions {
        disable_scoring: true,
        disable_tokenize: true,
        ..Default::default()
    };
    let server = MockServer::start(suite(), opts).unwrap();
    let gw = client(&server, 3);
    assert!(matches!(gw.score(&scoring()), Err(GatewayError::Capability(_))));
    assert!(matches!(gw.count_tokens("student", "abc"), Err(GatewayError::Capability(_))));
    // sampling still works
    assert_eq!(gw.sample(&job("student")).unwrap().len(), 3);
}

#[test]
fn missing_logprobs_are_capability_errors() {
    let opts = MockServerOptions {
        omit_logprobs: true,
        ..Default::default()
    };
    let server = MockServer::start(suite(), opts).unwrap();
    let gw = client(&server, 1);
    assert!(matches!(gw.sample(&job("teacher")), Err(GatewayError::Capability(_))));
    assert!(matches!(gw.score(&scoring()), Err(GatewayError::Capability(_))));
}

#[test]
fn unknown_model_is_not_retried() {
    let server = MockServer::start(suite(), MockServerOptions::default()).unwrap();
    let err = client(&server, 3).sample(&job("nobody")).unwrap_err();
    assert!(!matches!(err, GatewayError::Transport(_)), "{err:?}");
    assert_eq!(server.request_count(), 1);
}

#[test]
fn cli_over_http_matches_mock_mode() {
    let server = MockServer::start(suite(), MockServerOptions::default()).unwrap();
    let root = tempfile::tempdir().unwrap();
    let (http_dir, mock_dir) = (root.path().join("http"), root.path().join("mock"));
    let mut outputs = Vec::new();
    for (dir, mock) in [(&http_dir, false), (&mock_dir, true)] {
        fs::create_dir_all(dir).unwrap();
        let extra = format!("\n[gateway]\nbase_url = \"{}\"\ninitial_backoff_ms = 1\n", server.base_url());
        let config = common::write_config(dir, &extra);
        common::run_ok(&config, &["mock-questions", "--count", "6"]);
        for cmd in ["sample", "filter", "score"] {
            let args: Vec<&str> = if mock { vec!["--mock", cmd] } else { vec![cmd] };
            common::run_ok(&config, &args);
        }
        outputs.push(
            ["pool_low.jsonl", "kept_high.jsonl", "rejection_report_low.jsonl"]
                .map(|f| fs::read(dir.join("work").join(f)).unwrap()),
        );
    }
    assert!(server.request_count() > 0);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn cli_filter_falls_back_to_approximate_counts() {
    let opts = MockServerOptions {
        disable_tokenize: true,
        ..Default::default()
    };
    let server = MockServer::start(suite(), opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = format!("\n[gateway]\nbase_url = \"{}\"\ninitial_backoff_ms = 1\n", server.base_url());
    let config = common::write_config(dir.path(), &base);
    common::run_ok(&config, &["mock-questions", "--count", "3"]);
    common::run_ok(&config, &["sample"]);
    let out = common::run(&config, &["filter"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let config = common::write_config(dir.path(), &format!("{base}\n[filters.length]\nallow_approximate = true\n"));
    common::run_ok(&config, &["filter"]);
}
