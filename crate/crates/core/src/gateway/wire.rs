//! HTTP message bodies.
//!
//! Sampling: `POST /v1/completions` with [`CompletionRequestBody`].
//! Scoring: `POST /v1/completions` with [`ScoreRequestBody`] (the body carries
//! a `completion` to score instead of sampling parameters).
//! Tokenization: `POST /tokenize` with [`TokenizeRequestBody`].
//!
//! Sampling and scoring both answer with [`CompletionResponseBody`]; token
//! offsets count characters and may be relative to the completion or to
//! `prompt + completion` (echo style).

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::chars;
use crate::corpus::TokenSpan;

pub const COMPLETIONS_PATH: &str = "/v1/completions";
pub const TOKENIZE_PATH: &str = "/tokenize";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequestBody {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub logprobs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequestBody {
    pub model: String,
    pub prompt: String,
    pub completion: String,
    pub logprobs: bool,
}

/// Either request kind, as seen by a server.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AnyRequestBody {
    Score(ScoreRequestBody),
    Complete(CompletionRequestBody),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsBody {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<Option<f64>>,
    pub text_offset: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceBody {
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    #[serde(default)]
    pub logprobs: Option<LogprobsBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponseBody {
    pub choices: Vec<ChoiceBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequestBody {
    pub model: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponseBody {
    pub count: usize,
}

/// Completion-relative logprobs body for a token list.
pub fn logprobs_body(tokens: &[TokenSpan]) -> LogprobsBody {
    LogprobsBody {
        tokens: tokens.iter().map(|t| t.text.clone()).collect(),
        token_logprobs: tokens.iter().map(|t| Some(t.logprob)).collect(),
        text_offset: tokens.iter().map(|t| t.char_start).collect(),
    }
}

/// Converts a logprobs body into token spans tiling `completion`.
///
/// Accepts offsets relative to the completion, or relative to
/// `prompt + completion` with prompt tokens included or omitted.
pub fn token_spans(
    prompt: &str,
    completion: &str,
    body: &LogprobsBody,
) -> Result<Vec<TokenSpan>, GatewayError> {
    let n = body.tokens.len();
    if body.token_logprobs.len() != n || body.text_offset.len() != n {
        return Err(GatewayError::Protocol(format!(
            "logprobs arrays differ in length: {} tokens, {} logprobs, {} offsets",
            n,
            body.token_logprobs.len(),
            body.text_offset.len()
        )));
    }
    match walk(completion, body, 0) {
        Ok(spans) => Ok(spans),
        Err(first) => {
            let base = chars::char_len(prompt);
            if base == 0 {
                return Err(first);
            }
            walk(completion, body, base).map_err(|_| first)
        }
    }
}

fn walk(completion: &str, body: &LogprobsBody, base: usize) -> Result<Vec<TokenSpan>, GatewayError> {
    let table = chars::boundary_table(completion);
    let len = table.len() - 1;
    let mut cursor = 0usize;
    let mut spans = Vec::new();
    for i in 0..body.tokens.len() {
        let text = &body.tokens[i];
        let width = chars::char_len(text);
        let offset = body.text_offset[i];
        if width == 0 {
            continue;
        }
        if offset + width <= base {
            // echoed prompt token
            continue;
        }
        if offset < base {
            return Err(GatewayError::Protocol(format!(
                "token {i} straddles the prompt/completion boundary"
            )));
        }
        let start = offset - base;
        if start != cursor || start + width > len || completion[table[start]..table[start + width]] != **text {
            return Err(GatewayError::Protocol(format!(
                "token {i} at offset {offset} does not match the completion text"
            )));
        }
        let logprob = body.token_logprobs[i].ok_or_else(|| {
            GatewayError::Capability(format!(
                "token {i} has no logprob; enable logprobs on the backend"
            ))
        })?;
        spans.push(TokenSpan {
            text: text.clone(),
            logprob,
            char_start: start,
            char_end: start + width,
        });
        cursor = start + width;
    }
    if cursor != len {
        return Err(GatewayError::Protocol(format!(
            "token offsets cover {cursor} of {len} completion characters"
        )));
    }
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(tokens: &[&str], offsets: &[usize]) -> LogprobsBody {
        LogprobsBody {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            token_logprobs: tokens.iter().map(|_| Some(-0.5)).collect(),
            text_offset: offsets.to_vec(),
        }
    }

    #[test]
    fn completion_relative_offsets() {
        let spans = token_spans("Q", "hello world", &body(&["hello", " world"], &[0, 5])).unwrap();
        assert_eq!(spans[1].char_start, 5);
        assert_eq!(spans[1].char_end, 11);
    }

    #[test]
    fn echo_style_offsets() {
        let b = LogprobsBody {
            tokens: vec!["Q:".into(), "hi".into(), " yo".into()],
            token_logprobs: vec![None, Some(-1.0), Some(-2.0)],
            text_offset: vec![0, 2, 4],
        };
        let spans = token_spans("Q:", "hi yo", &b).unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].char_start, 0);
        assert_eq!(spans[1].logprob, -2.0);
    }

    #[test]
    fn mismatches_are_protocol_errors() {
        let err = token_spans("Q", "hello", &body(&["hel"], &[0])).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)));
        let err = token_spans("", "hello", &body(&["hello"], &[1])).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)));
    }

    #[test]
    fn missing_logprobs_are_capability_errors() {
        let mut b = body(&["hi"], &[0]);
        b.token_logprobs[0] = None;
        assert!(matches!(token_spans("", "hi", &b), Err(GatewayError::Capability(_))));
    }

    #[test]
    fn request_kinds_are_distinguished() {
        let score: AnyRequestBody = serde_json::from_str(
            r#"{"model":"m","prompt":"p","completion":"c","logprobs":true}"#,
        )
        .unwrap();
        assert!(matches!(score, AnyRequestBody::Score(_)));
        let complete: AnyRequestBody = serde_json::from_str(
            r#"{"model":"m","prompt":"p","temperature":1.0,"top_p":1.0,"max_tokens":4,"n":1,"logprobs":true}"#,
        )
        .unwrap();
        assert!(matches!(complete, AnyRequestBody::Complete(_)));
    }
}
