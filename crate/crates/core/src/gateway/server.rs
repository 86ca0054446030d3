//! In-process HTTP server exposing a [`MockBackend`] over the wire protocol.
//!
//! Used for hermetic tests of the HTTP client. Fault injection covers the
//! failure modes the client must handle: transient 5xx responses, missing
//! logprobs and absent scoring or tokenize endpoints.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use tiny_http::{Header, Method, Response, Server};

use super::mock::MockBackend;
use super::wire::{
    logprobs_body, AnyRequestBody, ChoiceBody, CompletionResponseBody, TokenizeRequestBody,
    TokenizeResponseBody, COMPLETIONS_PATH, TOKENIZE_PATH,
};
use super::{Backend, GatewayError, GenerationRequest, ScoringRequest};
use crate::corpus::FinishReason;

#[derive(Debug, Clone, Default)]
pub struct MockServerOptions {
    /// Answer the first `fail_first` requests with 503.
    pub fail_first: usize,
    pub omit_logprobs: bool,
    pub disable_scoring: bool,
    pub disable_tokenize: bool,
}

pub struct MockServer {
    server: Arc<Server>,
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    workers: Vec<JoinHandle<()>>,
}

const WORKERS: usize = 4;

impl MockServer {
    pub fn start(backend: MockBackend, options: MockServerOptions) -> io::Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let backend = Arc::new(backend);
        let options = Arc::new(options);
        let requests = Arc::new(AtomicUsize::new(0));
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let backend = Arc::clone(&backend);
                let options = Arc::clone(&options);
                let requests = Arc::clone(&requests);
                thread::spawn(move || {
                    while let Ok(mut request) = server.recv() {
                        let seen = requests.fetch_add(1, Ordering::SeqCst);
                        let mut body = String::new();
                        let (status, payload) =
                            if request.as_reader().read_to_string(&mut body).is_err() {
                                (400, error_json("unreadable body"))
                            } else if seen < options.fail_first {
                                (503, error_json("temporarily unavailable"))
                            } else {
                                route(
                                    &backend,
                                    &options,
                                    request.method(),
                                    request.url(),
                                    &body,
                                )
                            };
                        let header = Header::from_bytes("Content-Type", "application/json")
                            .expect("static header is valid");
                        let response = Response::from_string(payload)
                            .with_status_code(status)
                            .with_header(header);
                        let _ = request.respond(response);
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            addr,
            requests,
            workers,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn backend_error(e: GatewayError) -> (u16, String) {
    (400, error_json(&e.to_string()))
}

fn route(
    backend: &MockBackend,
    options: &MockServerOptions,
    method: &Method,
    url: &str,
    body: &str,
) -> (u16, String) {
    if *method != Method::Post {
        return (405, error_json("POST only"));
    }
    match url {
        COMPLETIONS_PATH => {
            let parsed: AnyRequestBody = match serde_json::from_str(body) {
                Ok(p) => p,
                Err(e) => return (400, error_json(&e.to_string())),
            };
            match parsed {
                AnyRequestBody::Score(req) => {
                    if options.disable_scoring {
                        return (404, error_json("echo scoring is not supported"));
                    }
                    let scoring = ScoringRequest {
                        model_id: req.model,
                        prompt: req.prompt,
                        completion: req.completion.clone(),
                    };
                    match backend.score(&scoring) {
                        Ok(tokens) => {
                            let choice = ChoiceBody {
                                index: 0,
                                text: req.completion,
                                finish_reason: Some("stop".into()),
                                logprobs: (!options.omit_logprobs).then(|| logprobs_body(&tokens)),
                            };
                            respond_choices(vec![choice])
                        }
                        Err(e) => backend_error(e),
                    }
                }
                AnyRequestBody::Complete(req) => {
                    let generation = GenerationRequest {
                        model_id: req.model,
                        prompt: req.prompt,
                        temperature: req.temperature,
                        top_p: req.top_p,
                        max_tokens: req.max_tokens,
                        n: req.n,
                        seed: req.seed,
                    };
                    match backend.generate(&generation) {
                        Ok(completions) => {
                            let choices = completions
                                .into_iter()
                                .enumerate()
                                .map(|(index, c)| ChoiceBody {
                                    index,
                                    logprobs: (!options.omit_logprobs)
                                        .then(|| logprobs_body(&c.tokens)),
                                    text: c.text,
                                    finish_reason: Some(
                                        match c.finish_reason {
                                            FinishReason::Stop => "stop",
                                            FinishReason::Length => "length",
                                        }
                                        .into(),
                                    ),
                                })
                                .collect();
                            respond_choices(choices)
                        }
                        Err(e) => backend_error(e),
                    }
                }
            }
        }
        TOKENIZE_PATH => {
            if options.disable_tokenize {
                return (404, error_json("tokenize is not supported"));
            }
            match serde_json::from_str::<TokenizeRequestBody>(body) {
                Ok(req) => match backend.count_tokens(&req.model, &req.prompt) {
                    Ok(count) => (
                        200,
                        serde_json::to_string(&TokenizeResponseBody { count })
                            .expect("plain struct serializes"),
                    ),
                    Err(e) => backend_error(e),
                },
                Err(e) => (400, error_json(&e.to_string())),
            }
        }
        _ => (404, error_json("no such endpoint")),
    }
}

fn respond_choices(choices: Vec<ChoiceBody>) -> (u16, String) {
    (
        200,
        serde_json::to_string(&CompletionResponseBody { choices }).expect("plain struct serializes"),
    )
}
