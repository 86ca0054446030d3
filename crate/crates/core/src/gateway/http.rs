//! Blocking HTTP backend.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    self, CompletionRequestBody, CompletionResponseBody, ScoreRequestBody, TokenizeRequestBody,
    TokenizeResponseBody, COMPLETIONS_PATH, TOKENIZE_PATH,
};
use super::{Backend, Completion, GatewayError, GenerationRequest, ScoringRequest};
use crate::corpus::{FinishReason, TokenSpan};

pub const DEFAULT_TIMEOUT_MS: u64 = 120_000;
pub const MAX_ATTEMPTS: u32 = 3;
pub const INITIAL_BACKOFF_MS: u64 = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_attempts: MAX_ATTEMPTS,
            initial_backoff_ms: INITIAL_BACKOFF_MS,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Op {
    Sample,
    Score,
    Tokenize,
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self { config, agent }
    }

    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
        op: Op,
    ) -> Result<R, GatewayError> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let mut delay = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last_error = String::new();
        let attempts = self.config.max_attempts.max(1);
        for attempt in 0..attempts {
            let mut req = self.agent.post(&url);
            if let Some(key) = self.config.api_key.as_deref().filter(|k| !k.is_empty()) {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(resp) => {
                    return resp.into_json::<R>().map_err(|e| {
                        GatewayError::Protocol(format!("undecodable response from {url}: {e}"))
                    })
                }
                Err(ureq::Error::Status(code, resp)) if code == 429 || code >= 500 => {
                    let detail = resp.into_string().unwrap_or_default();
                    last_error = format!("status {code}: {detail}");
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    return Err(classify_status(code, &detail, op));
                }
                Err(ureq::Error::Transport(t)) => last_error = t.to_string(),
            }
            if attempt + 1 < attempts {
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(GatewayError::Transport(format!(
            "{url} unavailable after {attempts} attempts: {last_error}"
        )))
    }
}

fn classify_status(code: u16, detail: &str, op: Op) -> GatewayError {
    match (op, code) {
        (Op::Score, 404 | 405 | 501) => GatewayError::Capability(format!(
            "backend lacks echo-scoring support (status {code}): {detail}"
        )),
        (Op::Tokenize, 404 | 405 | 501) => GatewayError::Capability(format!(
            "backend cannot tokenize (status {code}): {detail}"
        )),
        _ => GatewayError::InvalidRequest(format!("status {code}: {detail}")),
    }
}

impl Backend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Completion>, GatewayError> {
        let body = CompletionRequestBody {
            model: req.model_id.clone(),
            prompt: req.prompt.clone(),
            temperature: req.temperature,
            top_p: req.top_p,
            max_tokens: req.max_tokens,
            n: req.n,
            seed: req.seed,
            logprobs: true,
        };
        let mut resp: CompletionResponseBody = self.post(COMPLETIONS_PATH, &body, Op::Sample)?;
        resp.choices.sort_by_key(|c| c.index);
        resp.choices
            .into_iter()
            .map(|choice| {
                let logprobs = choice.logprobs.as_ref().ok_or_else(|| {
                    GatewayError::Capability(
                        "backend returned tokens without logprobs; enable logprobs on the server"
                            .into(),
                    )
                })?;
                let tokens = wire::token_spans(&req.prompt, &choice.text, logprobs)?;
                let finish_reason = match choice.finish_reason.as_deref() {
                    Some("length") => FinishReason::Length,
                    _ => FinishReason::Stop,
                };
                Ok(Completion {
                    text: choice.text,
                    tokens,
                    finish_reason,
                })
            })
            .collect()
    }

    fn score(&self, req: &ScoringRequest) -> Result<Vec<TokenSpan>, GatewayError> {
        let body = ScoreRequestBody {
            model: req.model_id.clone(),
            prompt: req.prompt.clone(),
            completion: req.completion.clone(),
            logprobs: true,
        };
        let resp: CompletionResponseBody = self.post(COMPLETIONS_PATH, &body, Op::Score)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Protocol("scoring response has no choices".into()))?;
        let logprobs = choice.logprobs.ok_or_else(|| {
            GatewayError::Capability("backend lacks echo-scoring: no logprobs returned".into())
        })?;
        wire::token_spans(&req.prompt, &req.completion, &logprobs)
    }

    fn count_tokens(&self, model_id: &str, text: &str) -> Result<usize, GatewayError> {
        let body = TokenizeRequestBody {
            model: model_id.to_owned(),
            prompt: text.to_owned(),
        };
        let resp: TokenizeResponseBody = self.post(TOKENIZE_PATH, &body, Op::Tokenize)?;
        Ok(resp.count)
    }
}
