//! Sampling and teacher-forced scoring against a model backend.
//!
//! A [`Gateway`] wraps any [`Backend`] (the HTTP client in [`http`] or the
//! deterministic character-trigram models in [`mock`]) and bounds the number
//! of backend calls in flight. Batch helpers return results in input order.

pub mod http;
pub mod mock;
pub mod server;
pub mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use thiserror::Error;

use crate::corpus::{self, FinishReason, ModelRole, Provenance, ResponseRecord, TokenSpan};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    /// Candidates per prompt.
    pub n: usize,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidRequest(m));
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1".into());
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringRequest {
    pub model_id: String,
    pub prompt: String,
    pub completion: String,
}

/// One generated candidate as returned by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<TokenSpan>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenCount {
    pub count: usize,
    /// Set when the count comes from the whitespace fallback instead of a tokenizer.
    pub approximate: bool,
}

/// Whitespace-delimited word count, always flagged approximate.
pub fn approximate_token_count(text: &str) -> TokenCount {
    TokenCount {
        count: text.split_whitespace().count(),
        approximate: true,
    }
}

pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Completion>, GatewayError>;
    fn score(&self, req: &ScoringRequest) -> Result<Vec<TokenSpan>, GatewayError>;
    fn count_tokens(&self, model_id: &str, text: &str) -> Result<usize, GatewayError>;
}

/// A sampling call tied to the question it answers.
#[derive(Debug, Clone)]
pub struct SampleJob {
    pub question_id: String,
    pub role: ModelRole,
    pub request: GenerationRequest,
}

/// Stable response id: `question/model/T<temperature>/<candidate>`.
pub fn response_id(question_id: &str, model_id: &str, temperature: f64, index: usize) -> String {
    format!("{question_id}/{model_id}/T{temperature}/{index}")
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    max_in_flight: usize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, max_in_flight: usize) -> Self {
        Self {
            backend,
            max_in_flight: max_in_flight.max(1),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn sample(&self, job: &SampleJob) -> Result<Vec<ResponseRecord>, GatewayError> {
        let req = &job.request;
        req.validate()?;
        let completions = self.backend.generate(req)?;
        if completions.len() != req.n {
            return Err(GatewayError::Protocol(format!(
                "requested {} candidates, backend returned {}",
                req.n,
                completions.len()
            )));
        }
        completions
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                corpus::validate_tiling(&c.text, &c.tokens).map_err(|e| {
                    GatewayError::Protocol(format!("candidate {i}: tokens.{}: {}", e.field, e.message))
                })?;
                Ok(ResponseRecord {
                    id: response_id(&job.question_id, &req.model_id, req.temperature, i),
                    question_id: job.question_id.clone(),
                    model_id: req.model_id.clone(),
                    model_role: job.role,
                    temperature: req.temperature,
                    text: c.text,
                    finish_reason: c.finish_reason,
                    tokens: Some(c.tokens),
                    is_correct: None,
                    provenance: Provenance::Sampled,
                })
            })
            .collect()
    }

    pub fn sample_many(&self, jobs: &[SampleJob]) -> Vec<Result<Vec<ResponseRecord>, GatewayError>> {
        self.map_bounded(jobs, |job| self.sample(job))
    }

    /// Teacher-forced per-token logprobs of `req.completion`.
    pub fn score(&self, req: &ScoringRequest) -> Result<Vec<TokenSpan>, GatewayError> {
        if req.completion.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "completion to score must be non-empty".into(),
            ));
        }
        let spans = self.backend.score(req)?;
        corpus::validate_tiling(&req.completion, &spans).map_err(|e| {
            GatewayError::Protocol(format!("score tokens.{}: {}", e.field, e.message))
        })?;
        Ok(spans)
    }

    pub fn score_many(&self, reqs: &[ScoringRequest]) -> Vec<Result<Vec<TokenSpan>, GatewayError>> {
        self.map_bounded(reqs, |r| self.score(r))
    }

    pub fn count_tokens(&self, model_id: &str, text: &str) -> Result<TokenCount, GatewayError> {
        if text.is_empty() {
            return Ok(TokenCount {
                count: 0,
                approximate: false,
            });
        }
        Ok(TokenCount {
            count: self.backend.count_tokens(model_id, text)?,
            approximate: false,
        })
    }

    /// Applies `f` to every item with at most `max_in_flight` concurrent calls.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        let workers = self.max_in_flight.min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let out = f(&items[i]);
                    *slots[i].lock().expect("result slot poisoned") = Some(out);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .expect("result slot poisoned")
                    .expect("every slot is filled")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockBackend, MockModel, TableParams, TrigramTable};
    use super::*;

    fn gateway() -> Gateway {
        let table = TrigramTable::generate("abc", 3, &TableParams::default());
        let mut backend = MockBackend::new();
        backend.register("tri", MockModel::plain(table));
        Gateway::new(Arc::new(backend), 4)
    }

    fn job(seed: u64, n: usize, max_tokens: usize) -> SampleJob {
        SampleJob {
            question_id: "q1".into(),
            role: ModelRole::Teacher,
            request: GenerationRequest {
                model_id: "tri".into(),
                prompt: "ab".into(),
                temperature: 1.0,
                top_p: 1.0,
                max_tokens,
                n,
                seed: Some(seed),
            },
        }
    }

    #[test]
    fn same_seed_gives_identical_records() {
        let gw = gateway();
        let a = gw.sample(&job(7, 2, 32)).unwrap();
        let b = gw.sample(&job(7, 2, 32)).unwrap();
        assert_eq!(a.len(), 2);
        let line = |r: &ResponseRecord| corpus::to_line(r).unwrap();
        assert_eq!(a.iter().map(line).collect::<Vec<_>>(), b.iter().map(line).collect::<Vec<_>>());
        assert_eq!(a[0].temperature, 1.0);
        assert_eq!(a[0].id, "q1/tri/T1/0");
    }

    #[test]
    fn one_token_budget() {
        let gw = gateway();
        for seed in 0..50 {
            for rec in gw.sample(&job(seed, 3, 1)).unwrap() {
                let tokens = rec.tokens.unwrap();
                if tokens.is_empty() {
                    assert_eq!(rec.finish_reason, FinishReason::Stop);
                } else {
                    assert_eq!(tokens.len(), 1);
                    assert_eq!(rec.finish_reason, FinishReason::Length);
                }
            }
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let gw = gateway();
        let mut j = job(1, 1, 0);
        assert!(matches!(gw.sample(&j), Err(GatewayError::InvalidRequest(_))));
        j.request.max_tokens = 4;
        j.request.n = 0;
        assert!(matches!(gw.sample(&j), Err(GatewayError::InvalidRequest(_))));
        j.request.n = 1;
        j.request.top_p = 0.0;
        assert!(matches!(gw.sample(&j), Err(GatewayError::InvalidRequest(_))));
        j.request.top_p = 1.0;
        j.request.model_id = "nope".into();
        assert!(matches!(gw.sample(&j), Err(GatewayError::UnknownModel(_))));
    }

    #[test]
    fn token_counting() {
        let gw = gateway();
        assert_eq!(gw.count_tokens("tri", "").unwrap().count, 0);
        assert_eq!(gw.count_tokens("tri", "abc").unwrap().count, 3);
        let approx = approximate_token_count("a b  c");
        assert_eq!(approx.count, 3);
        assert!(approx.approximate);
    }

    #[test]
    fn bounded_map_preserves_order() {
        let gw = gateway();
        let items: Vec<usize> = (0..100).collect();
        let out = gw.map_bounded(&items, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
