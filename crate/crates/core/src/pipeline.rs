//! Command orchestration over a work directory.
//!
//! Every command reads and writes named files under `paths.work_dir`; no
//! state passes between commands any other way. A lock file keeps two runs
//! from sharing a directory, and each run leaves a `<command>.config.toml`
//! snapshot of the configuration it used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{self, CorpusError, Domain, FieldError, FinishReason, ModelRole, QuestionRecord, Record, ResponseRecord, TokenSpan};
use crate::das::{self, DasError, ScoredCandidate, SelectionRecord};
use crate::divergence::{self, DivergenceError, SentenceTriple, SentenceType};
use crate::filters::{self, GatewayCounter, RejectReason, TokenCounter};
use crate::gateway::http::HttpBackend;
use crate::gateway::mock::{MockBackend, MockSuiteIds};
use crate::gateway::{self, Backend, Gateway, GatewayError, GenerationRequest, SampleJob, ScoringRequest, TokenCount};
use crate::likelihood::{self, LikelihoodError};
use crate::mixed_policy::{self, ContinuationContext, MixedPolicyError, MixedPolicyReport, RegenerationInput};
use crate::scheduler::{self, PoolInput, SchedulerError};
use crate::segmenter::{self, SegmentError};
use crate::seqkl::{self, SeqKlError, ToyLm};
use crate::util::stable_hash;

pub const LOCK_FILE: &str = ".seqdistill.lock";

/// Model id the mock registers as the distilled model when none is configured.
const MOCK_DISTILLED_FALLBACK: &str = "distilled";

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration or inputs; exit status 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running; exit status 2.
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 1,
            PipelineError::Runtime(_) => 2,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_error(path: &Path, e: io::Error) -> PipelineError {
    PipelineError::Runtime(format!("{}: {e}", path.display()))
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match &e {
            CorpusError::Io { source, .. } if source.kind() != io::ErrorKind::NotFound => {
                PipelineError::Runtime(e.to_string())
            }
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

impl From<SchedulerError> for PipelineError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::Corpus(c) => c.into(),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {
        $(impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Validation(e.to_string())
            }
        })*
    };
}

validation_from!(ConfigError, MixedPolicyError, SeqKlError, DasError, DivergenceError, LikelihoodError, SegmentError);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sample,
    Filter,
    Score,
    Classify,
    Select,
    BuildStages,
    MixedPolicy,
    Analyze,
    Oracle,
}

impl Command {
    /// Commands in data-flow order.
    pub const ALL: [Command; 9] = [
        Command::Sample,
        Command::Filter,
        Command::Score,
        Command::Classify,
        Command::Select,
        Command::BuildStages,
        Command::MixedPolicy,
        Command::Analyze,
        Command::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Filter => "filter",
            Command::Score => "score",
            Command::Classify => "classify",
            Command::Select => "select",
            Command::BuildStages => "build-stages",
            Command::MixedPolicy => "mixed-policy",
            Command::Analyze => "analyze",
            Command::Oracle => "oracle",
        }
    }

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }

    fn needs_questions(self) -> bool {
        !matches!(self, Command::Analyze | Command::Oracle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Low,
    High,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::Low => "low",
            Pool::High => "high",
        }
    }

    pub fn temperature(self, cfg: &PipelineConfig) -> f64 {
        match self {
            Pool::Low => cfg.scheduler.low_t,
            Pool::High => cfg.scheduler.high_t,
        }
    }
}

/// File names inside the work directory.
pub mod files {
    use super::Pool;

    pub fn pool(p: Pool) -> String {
        format!("pool_{}.jsonl", p.name())
    }
    pub fn sample_failures(p: Pool) -> String {
        format!("sample_failures_{}.jsonl", p.name())
    }
    pub fn kept(p: Pool) -> String {
        format!("kept_{}.jsonl", p.name())
    }
    pub fn rejection_report(p: Pool) -> String {
        format!("rejection_report_{}.jsonl", p.name())
    }
    pub fn verdicts(p: Pool) -> String {
        format!("verdicts_{}.jsonl", p.name())
    }
    pub fn scores(p: Pool) -> String {
        format!("scores_{}.jsonl", p.name())
    }
    pub fn score_failures(p: Pool) -> String {
        format!("score_failures_{}.jsonl", p.name())
    }
    pub fn labels(p: Pool) -> String {
        format!("labels_{}.jsonl", p.name())
    }
    pub fn candidates(p: Pool) -> String {
        format!("candidates_{}.jsonl", p.name())
    }
    pub fn selection(p: Pool) -> String {
        format!("selection_{}.jsonl", p.name())
    }
    pub fn likelihood(p: Pool, model: &str) -> String {
        format!("likelihood_{}_{model}.csv", p.name())
    }
    pub const STUDENT_REGEN: &str = "student_regen.jsonl";
    pub const CUTOFF_TABLE: &str = "cutoff_table.csv";
    pub const MIXED_POLICY: &str = "mixed_policy.jsonl";
    pub const MIXED_DATASET: &str = "mixed_dataset.jsonl";
    pub const MIXED_REJECTIONS: &str = "mixed_rejections.jsonl";
    pub const MIXED_REPORT: &str = "mixed_report.jsonl";
    pub const LIKELIHOOD_SUMMARY: &str = "likelihood_summary.csv";
    pub const PROFILE: &str = "profile.csv";
    pub const DELTA: &str = "delta.csv";
    pub const ORACLE_KL: &str = "oracle_kl.csv";
    pub const ORACLE_COVERAGE: &str = "oracle_coverage.csv";

    pub fn snapshot(command: &str) -> String {
        format!("{command}.config.toml")
    }
}

/// A per-record failure that did not stop the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureRecord {
    pub id: String,
    pub message: String,
}

impl Record for FailureRecord {
    const KIND: &'static str = "failure";

    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceScore {
    pub index: usize,
    pub char_start: usize,
    pub char_end: usize,
    /// Teacher tokens owned by the sentence.
    pub teacher_tokens: usize,
    pub mean_lp_teacher: f64,
    pub mean_lp_student: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lp_distilled: Option<f64>,
}

/// Per-sentence and whole-response mean logprobs of one kept response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub response_id: String,
    pub question_id: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
    pub mean_lp_teacher: f64,
    pub mean_lp_student: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lp_distilled: Option<f64>,
    pub sentences: Vec<SentenceScore>,
}

impl Record for ScoreRecord {
    const KIND: &'static str = "score";

    fn record_id(&self) -> Option<&str> {
        Some(&self.response_id)
    }

    fn validate(&self) -> std::result::Result<(), FieldError> {
        if self.sentences.is_empty() {
            return Err(FieldError::new("sentences", "must be non-empty"));
        }
        if self.sentences.iter().enumerate().any(|(i, s)| s.index != i) {
            return Err(FieldError::new("sentences", "indices must run 0, 1, 2, ..."));
        }
        if self.sentences.windows(2).any(|w| w[0].char_end != w[1].char_start) {
            return Err(FieldError::new("sentences", "spans must be contiguous"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub response_id: String,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
    pub labels: Vec<SentenceType>,
}

impl Record for LabelRecord {
    const KIND: &'static str = "labels";

    fn record_id(&self) -> Option<&str> {
        Some(&self.response_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Use the built-in mock models instead of the HTTP backend.
    pub mock: bool,
    /// Also write per-record verdicts and report progress.
    pub verbose: bool,
    /// Build a single stage from the low-temperature pool.
    pub single_stage: bool,
}

/// Deterministic math-style questions for hermetic runs against the mock.
pub fn mock_questions(count: usize, seed: u64) -> Vec<QuestionRecord> {
    (0..count)
        .map(|i| {
            let prompt = format!(
                "Problem {i}: find the hidden digit of puzzle {:016x}.",
                stable_hash(&[b"question", &seed.to_le_bytes(), &(i as u64).to_le_bytes()])
            );
            let answer = gateway::mock::truth_digit(&prompt);
            QuestionRecord {
                id: format!("q{i:04}"),
                domain: Domain::Math,
                prompt,
                reference_answer: Some(answer.to_string()),
            }
        })
        .collect()
}

/// Counts student tokens through the gateway, falling back to an
/// approximate count when tokenization is unsupported and allowed.
struct StudentCounter<'a> {
    inner: GatewayCounter<'a>,
    allow_approximate: bool,
}

impl TokenCounter for StudentCounter<'_> {
    fn count(&self, text: &str) -> std::result::Result<TokenCount, GatewayError> {
        match self.inner.count(text) {
            Err(GatewayError::Capability(_)) if self.allow_approximate => {
                Ok(gateway::approximate_token_count(text))
            }
            other => other,
        }
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Runtime(format!(
                "{} exists: another run is using this directory (remove the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(io_error(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let s = seed.to_le_bytes();
    let mut bytes: Vec<&[u8]> = vec![b"pipeline", &s];
    bytes.extend(parts.iter().map(|p| p.as_bytes()));
    stable_hash(&bytes)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub struct Pipeline {
    cfg: PipelineConfig,
    opts: RunOptions,
    gateway: Gateway,
}

impl Pipeline {
    /// Validates `cfg` and connects the backend.
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let backend: Arc<dyn Backend> = if opts.mock {
            Arc::new(MockBackend::standard(MockSuiteIds {
                teacher: &cfg.models.teacher,
                student: &cfg.models.student,
                distilled: cfg.models.distilled.as_deref().unwrap_or(MOCK_DISTILLED_FALLBACK),
            }))
        } else {
            Arc::new(HttpBackend::new(cfg.gateway.http_config()))
        };
        let gateway = Gateway::new(backend, cfg.gateway.max_in_flight);
        Ok(Self { cfg, opts, gateway })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn work_dir(&self) -> &Path {
        &self.cfg.paths.work_dir
    }

    fn pools(&self) -> Vec<Pool> {
        if self.opts.single_stage {
            vec![Pool::Low]
        } else {
            vec![Pool::Low, Pool::High]
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.work_dir().join(name)
    }

    fn log(&self, message: &str) {
        if self.opts.verbose {
            eprintln!("{message}");
        }
    }

    /// Runs one command and returns a short summary per output.
    pub fn run(&self, command: Command) -> Result<Vec<String>> {
        if command.needs_questions() && !self.cfg.paths.questions.is_file() {
            return Err(PipelineError::Validation(format!(
                "questions file {} does not exist",
                self.cfg.paths.questions.display()
            )));
        }
        let dir = self.work_dir();
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let _lock = DirLock::acquire(dir)?;
        let snapshot = self.path(&files::snapshot(command.name()));
        fs::write(&snapshot, self.cfg.snapshot()?).map_err(|e| io_error(&snapshot, e))?;
        self.log(&format!("{}: work dir {}", command.name(), dir.display()));
        match command {
            Command::Sample => self.sample(),
            Command::Filter => self.filter(),
            Command::Score => self.score(),
            Command::Classify => self.classify(),
            Command::Select => self.select(),
            Command::BuildStages => self.build_stages(),
            Command::MixedPolicy => self.mixed_policy(),
            Command::Analyze => self.analyze(),
            Command::Oracle => self.oracle(),
        }
    }

    fn questions(&self) -> Result<BTreeMap<String, QuestionRecord>> {
        let records: Vec<QuestionRecord> = corpus::read_records(&self.cfg.paths.questions)?;
        Ok(records.into_iter().map(|q| (q.id.clone(), q)).collect())
    }

    fn input<R: Record>(&self, name: &str, producer: Command) -> Result<Vec<R>> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(PipelineError::Validation(format!(
                "missing input {}; run `{}` first",
                path.display(),
                producer.name()
            )));
        }
        Ok(corpus::read_records(&path)?)
    }

    fn write<R: Record>(&self, name: &str, records: &[R]) -> Result<String> {
        let n = corpus::write_records(records, &self.path(name))?;
        Ok(format!("{name}: {n} records"))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<String> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        Ok(format!("{name}: {} lines", text.lines().count()))
    }

    fn counter(&self) -> StudentCounter<'_> {
        StudentCounter {
            inner: GatewayCounter {
                gateway: &self.gateway,
                model_id: self.cfg.models.student.clone(),
            },
            allow_approximate: self.cfg.filters.length.allow_approximate,
        }
    }

    fn sample(&self) -> Result<Vec<String>> {
        let questions = self.questions()?;
        let mut summary = Vec::new();
        for pool in self.pools() {
            let temperature = pool.temperature(&self.cfg);
            let jobs: Vec<SampleJob> = questions
                .values()
                .map(|q| SampleJob {
                    question_id: q.id.clone(),
                    role: ModelRole::Teacher,
                    request: GenerationRequest {
                        model_id: self.cfg.models.teacher.clone(),
                        prompt: q.prompt.clone(),
                        temperature,
                        top_p: self.cfg.sampling.top_p,
                        max_tokens: self.cfg.sampling.max_tokens,
                        n: self.cfg.sampling.candidates,
                        seed: Some(derive_seed(self.cfg.seed, &["sample", pool.name(), &q.id])),
                    },
                })
                .collect();
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for (job, result) in jobs.iter().zip(self.gateway.sample_many(&jobs)) {
                match result {
                    Ok(batch) => {
                        let reference = questions[&job.question_id].reference_answer.as_deref();
                        records.extend(batch.into_iter().map(|mut r| {
                            r.is_correct = reference.map(|a| divergence::boxed_answer_correct(&r.text, a));
                            r
                        }));
                    }
                    Err(e) => failures.push(FailureRecord {
                        id: job.question_id.clone(),
                        message: e.to_string(),
                    }),
                }
            }
            if records.is_empty() && !failures.is_empty() {
                return Err(PipelineError::Runtime(format!(
                    "every sampling request failed; first error: {}",
                    failures[0].message
                )));
            }
            records.sort_by(|a, b| a.id.cmp(&b.id));
            summary.push(self.write(&files::pool(pool), &records)?);
            summary.push(self.write(&files::sample_failures(pool), &failures)?);
        }
        Ok(summary)
    }

    fn filter(&self) -> Result<Vec<String>> {
        let questions = self.questions()?;
        let counter = self.counter();
        let mut summary = Vec::new();
        for pool in self.pools() {
            let records: Vec<ResponseRecord> = self.input(&files::pool(pool), Command::Sample)?;
            let outcome = filters::filter_pipeline(
                &records,
                |r| questions.get(&r.question_id).map(|q| q.prompt.clone()),
                &self.cfg.filters,
                &counter,
            );
            let report = &outcome.report;
            if report.input_count > 0 && report.reasons.get(RejectReason::Error) == report.input_count {
                let first = outcome.verdicts.iter().find_map(|v| v.diagnostics.clone());
                return Err(PipelineError::Runtime(format!(
                    "every record in {} failed to filter: {}",
                    files::pool(pool),
                    first.unwrap_or_default()
                )));
            }
            summary.push(self.write(&files::kept(pool), &outcome.kept)?);
            summary.push(self.write(&files::rejection_report(pool), std::slice::from_ref(report))?);
            if self.opts.verbose {
                summary.push(self.write(&files::verdicts(pool), &outcome.verdicts)?);
            }
        }
        Ok(summary)
    }

    fn scoring_models(&self) -> Vec<&str> {
        let m = &self.cfg.models;
        let mut out = vec![m.teacher.as_str(), m.student.as_str()];
        out.extend(m.distilled.as_deref());
        out
    }

    fn score(&self) -> Result<Vec<String>> {
        let questions = self.questions()?;
        let models = self.scoring_models();
        let mut summary = Vec::new();
        for pool in self.pools() {
            let kept: Vec<ResponseRecord> = self.input(&files::kept(pool), Command::Filter)?;
            let mut requests = Vec::with_capacity(kept.len() * models.len());
            for r in &kept {
                let q = questions.get(&r.question_id).ok_or_else(|| {
                    PipelineError::Validation(format!("record `{}` refers to an unknown question", r.id))
                })?;
                requests.extend(models.iter().map(|m| ScoringRequest {
                    model_id: (*m).to_owned(),
                    prompt: q.prompt.clone(),
                    completion: r.text.clone(),
                }));
            }
            let results = self.gateway.score_many(&requests);
            let mut scores = Vec::new();
            let mut failures = Vec::new();
            for (r, chunk) in kept.iter().zip(results.chunks(models.len())) {
                let outcome = chunk
                    .iter()
                    .cloned()
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())
                    .and_then(|tokens| score_record(r, &tokens, &self.cfg.segmenter));
                match outcome {
                    Ok(s) => scores.push(s),
                    Err(message) => failures.push(FailureRecord {
                        id: r.id.clone(),
                        message,
                    }),
                }
            }
            if scores.is_empty() && !failures.is_empty() {
                return Err(PipelineError::Runtime(format!(
                    "every scoring request failed; first error: {}",
                    failures[0].message
                )));
            }
            summary.push(self.write(&files::scores(pool), &scores)?);
            summary.push(self.write(&files::score_failures(pool), &failures)?);
        }
        Ok(summary)
    }

    fn classify(&self) -> Result<Vec<String>> {
        if self.cfg.models.distilled.is_none() {
            return Err(PipelineError::Validation(
                "classify needs models.distilled; set it and re-run `score`".into(),
            ));
        }
        let tau = self.cfg.divergence.tau;
        let mut summary = Vec::new();
        for pool in self.pools() {
            let scores: Vec<ScoreRecord> = self.input(&files::scores(pool), Command::Score)?;
            let labels = scores
                .iter()
                .map(|s| {
                    let labels = s
                        .sentences
                        .iter()
                        .map(|x| {
                            divergence::classify_sentence(
                                &SentenceTriple {
                                    sentence_index: x.index,
                                    mean_lp_teacher: x.mean_lp_teacher,
                                    mean_lp_student: x.mean_lp_student,
                                    mean_lp_distilled: x.mean_lp_distilled,
                                },
                                tau,
                            )
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| {
                            PipelineError::Validation(format!(
                                "{}: {e}; re-run `score` with models.distilled set",
                                s.response_id
                            ))
                        })?;
                    Ok(LabelRecord {
                        response_id: s.response_id.clone(),
                        question_id: s.question_id.clone(),
                        is_correct: s.is_correct,
                        labels,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            summary.push(self.write(&files::labels(pool), &labels)?);
        }
        Ok(summary)
    }

    fn select(&self) -> Result<Vec<String>> {
        let tau = self.cfg.divergence.tau;
        let budget = self.cfg.das.budget.unwrap_or(usize::MAX);
        let mut summary = Vec::new();
        for pool in self.pools() {
            let scores: Vec<ScoreRecord> = self.input(&files::scores(pool), Command::Score)?;
            let candidates = scores
                .iter()
                .map(|s| {
                    let teacher: Vec<f64> = s.sentences.iter().map(|x| x.mean_lp_teacher).collect();
                    let student: Vec<f64> = s.sentences.iter().map(|x| x.mean_lp_student).collect();
                    let counts: Vec<usize> = s.sentences.iter().map(|x| x.teacher_tokens).collect();
                    Ok(ScoredCandidate {
                        response_id: s.response_id.clone(),
                        question_id: s.question_id.clone(),
                        das_score: das::das_score(&teacher, &student, &counts, tau)?,
                        sentence_count: counts.len(),
                        token_count: counts.iter().sum(),
                        temperature: s.temperature,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let selection: Vec<SelectionRecord> = das::select(&candidates, budget, self.cfg.das.quota)?
                .into_iter()
                .map(SelectionRecord::from)
                .collect();
            summary.push(self.write(&files::candidates(pool), &candidates)?);
            summary.push(self.write(&files::selection(pool), &selection)?);
        }
        Ok(summary)
    }

    /// Kept records of `pool` that the selection names, in id order.
    fn selected(&self, pool: Pool) -> Result<Vec<ResponseRecord>> {
        let kept: Vec<ResponseRecord> = self.input(&files::kept(pool), Command::Filter)?;
        let selection: Vec<SelectionRecord> = self.input(&files::selection(pool), Command::Select)?;
        let ids: BTreeSet<&str> = selection.iter().map(|s| s.response_id.as_str()).collect();
        let chosen: Vec<ResponseRecord> = kept.into_iter().filter(|r| ids.contains(r.id.as_str())).collect();
        if chosen.len() != ids.len() {
            let found: BTreeSet<&str> = chosen.iter().map(|r| r.id.as_str()).collect();
            let missing = ids.difference(&found).next().copied().unwrap_or_default();
            return Err(PipelineError::Validation(format!(
                "{} names `{missing}`, which is not in {}",
                files::selection(pool),
                files::kept(pool)
            )));
        }
        Ok(chosen)
    }

    fn build_stages(&self) -> Result<Vec<String>> {
        let questions = self.questions()?;
        let meta = &self.cfg.scheduler.training_meta;
        let markers = &self.cfg.filters.markers;
        let low = self.selected(Pool::Low)?;
        let low_source = files::kept(Pool::Low);
        let low_input = PoolInput {
            records: &low,
            temperature: Pool::Low.temperature(&self.cfg),
            source: &low_source,
        };
        let stages = if self.opts.single_stage {
            vec![scheduler::build_single_stage(&low_input, &questions, meta, markers)?]
        } else {
            let high = self.selected(Pool::High)?;
            let high_source = files::kept(Pool::High);
            let high_input = PoolInput {
                records: &high,
                temperature: Pool::High.temperature(&self.cfg),
                source: &high_source,
            };
            scheduler::build_stages(&low_input, &high_input, &questions, meta, markers)?
        };
        scheduler::write_stages(&stages, self.work_dir())?;
        Ok(stages
            .iter()
            .map(|s| format!("{}: {} examples", s.manifest.dataset, s.manifest.selected_count))
            .collect())
    }

    /// Student-token length of the first selected low-temperature response per question.
    fn teacher_lengths(&self) -> Result<BTreeMap<String, usize>> {
        let selected = self.selected(Pool::Low)?;
        let mut first: BTreeMap<&str, &ResponseRecord> = BTreeMap::new();
        for r in &selected {
            first.entry(&r.question_id).or_insert(r);
        }
        let counter = self.counter();
        first
            .into_iter()
            .map(|(q, r)| Ok((q.to_owned(), counter.count(&r.text)?.count)))
            .collect()
    }

    fn mixed_policy(&self) -> Result<Vec<String>> {
        let questions = self.questions()?;
        let mixed = &self.cfg.mixed;
        let teacher_lengths = self.teacher_lengths()?;
        let inputs = teacher_lengths
            .iter()
            .map(|(q, &teacher_length)| {
                let question = questions.get(q).ok_or_else(|| {
                    PipelineError::Validation(format!("selected question `{q}` is not in the questions file"))
                })?;
                Ok(RegenerationInput {
                    question,
                    teacher_length,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let regenerated =
            mixed_policy::regenerate(&inputs, &self.gateway, &self.cfg.models.student, mixed, self.cfg.seed)?;
        let mut students = Vec::new();
        let mut regeneration_failures = 0;
        for r in regenerated {
            match r {
                Ok(record) => students.push(record),
                Err(e) => {
                    regeneration_failures += 1;
                    self.log(&format!("regeneration failed: {e}"));
                }
            }
        }
        if students.is_empty() && regeneration_failures > 0 {
            return Err(PipelineError::Runtime("every student regeneration failed".into()));
        }
        students.sort_by(|a, b| a.id.cmp(&b.id));
        let table = mixed_policy::cutoff_rate(&students, &teacher_lengths, &mixed.bin_edges)?;

        let counter = self.counter();
        let ctx = ContinuationContext {
            gateway: &self.gateway,
            teacher_model: &self.cfg.models.teacher,
            cfg: mixed,
            filter: &self.cfg.filters,
            counter: &counter,
            seed: self.cfg.seed,
        };
        let (records, rejections) = mixed_policy::continue_batch(&students, &questions, &ctx)?;
        let examples = mixed_policy::emit_training_examples(&records, &questions, mixed.mask_prefix)?;
        let mut reasons = BTreeMap::new();
        for r in &rejections {
            *reasons.entry(r.reason_key()).or_insert(0) += 1;
        }
        let report = MixedPolicyReport {
            questions: inputs.len(),
            regenerated: students.len(),
            regeneration_failures,
            truncated: students.iter().filter(|r| r.finish_reason == FinishReason::Length).count(),
            retained: records.len(),
            rejected: rejections.len(),
            reasons,
        };
        Ok(vec![
            self.write(files::STUDENT_REGEN, &students)?,
            self.write_text(files::CUTOFF_TABLE, &table.to_csv())?,
            self.write(files::MIXED_POLICY, &records)?,
            self.write(files::MIXED_DATASET, &examples)?,
            self.write(files::MIXED_REJECTIONS, &rejections)?,
            self.write(files::MIXED_REPORT, std::slice::from_ref(&report))?,
        ])
    }

    fn analyze(&self) -> Result<Vec<String>> {
        let mut summary = Vec::new();
        let mut found_any = false;
        let mut table = String::from("pool,model,count,mean,iqr\n");
        for pool in self.pools() {
            if !self.path(&files::scores(pool)).is_file() {
                continue;
            }
            found_any = true;
            let scores: Vec<ScoreRecord> = self.input(&files::scores(pool), Command::Score)?;
            let mut series: Vec<(&str, Vec<f64>)> = vec![
                ("teacher", scores.iter().map(|s| s.mean_lp_teacher.exp()).collect()),
                ("student", scores.iter().map(|s| s.mean_lp_student.exp()).collect()),
            ];
            if scores.iter().all(|s| s.mean_lp_distilled.is_some()) && !scores.is_empty() {
                series.push((
                    "distilled",
                    scores.iter().filter_map(|s| s.mean_lp_distilled).map(f64::exp).collect(),
                ));
            }
            for (model, values) in &series {
                if values.is_empty() {
                    continue;
                }
                let hist = likelihood::density(values, self.cfg.analyze.bins)?;
                summary.push(self.write_text(&files::likelihood(pool, model), &hist.to_csv())?);
                let _ = writeln!(
                    table,
                    "{},{},{},{},{}",
                    pool.name(),
                    model,
                    values.len(),
                    mean(values).map(|m| m.to_string()).unwrap_or_default(),
                    likelihood::interquartile_range(values).map(|m| m.to_string()).unwrap_or_default()
                );
            }
        }
        if found_any {
            summary.push(self.write_text(files::LIKELIHOOD_SUMMARY, &table)?);
        }

        let mut labeled = Vec::new();
        for pool in self.pools() {
            if !self.path(&files::labels(pool)).is_file() {
                continue;
            }
            found_any = true;
            let labels: Vec<LabelRecord> = self.input(&files::labels(pool), Command::Classify)?;
            labeled.extend(labels.into_iter().filter_map(|l| l.is_correct.map(|c| (l.labels, c))));
        }
        if !labeled.is_empty() {
            let max_position = self.cfg.divergence.max_position;
            let profiles = divergence::positionwise_profile(&labeled, max_position);
            summary.push(self.write_text(files::PROFILE, &divergence::profile_csv(&profiles))?);
            let mut delta = String::from("type,delta\n");
            for ty in SentenceType::ALL {
                match divergence::delta_area(&profiles, ty, max_position) {
                    Ok(d) => {
                        let _ = writeln!(delta, "{},{d}", ty.as_str());
                    }
                    Err(e) => {
                        self.log(&format!("delta for {}: {e}", ty.as_str()));
                        let _ = writeln!(delta, "{},", ty.as_str());
                    }
                }
            }
            summary.push(self.write_text(files::DELTA, &delta)?);
        }

        if self.path(files::STUDENT_REGEN).is_file() {
            found_any = true;
            let students: Vec<ResponseRecord> = self.input(files::STUDENT_REGEN, Command::MixedPolicy)?;
            let lengths = self.teacher_lengths()?;
            let table = mixed_policy::cutoff_rate(&students, &lengths, &self.cfg.mixed.bin_edges)?;
            summary.push(self.write_text(files::CUTOFF_TABLE, &table.to_csv())?);
        }
        if !found_any {
            return Err(PipelineError::Validation(format!(
                "nothing to analyze in {}; run `score`, `classify` or `mixed-policy` first",
                self.work_dir().display()
            )));
        }
        Ok(summary)
    }

    fn oracle(&self) -> Result<Vec<String>> {
        let o = &self.cfg.oracle;
        let name = |p: &Path| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let (teacher, student, t_name, s_name) = match (&o.teacher_lm, &o.student_lm) {
            (Some(t), Some(s)) => (ToyLm::read(t)?, ToyLm::read(s)?, name(t), name(s)),
            (None, None) => (
                seqkl::two_sequence(0.75)?,
                seqkl::two_sequence(0.5)?,
                "two_sequence(0.75)".to_owned(),
                "two_sequence(0.5)".to_owned(),
            ),
            _ => {
                return Err(PipelineError::Validation(
                    "set both oracle.teacher_lm and oracle.student_lm, or neither".into(),
                ))
            }
        };
        let p = seqkl::enumerate_distribution(&teacher)?;
        let q = seqkl::enumerate_distribution(&student)?;
        let kl = seqkl::seq_kl(&p, &q)?;
        let ce = seqkl::seq_ce(&p, &q)?;
        let h = seqkl::entropy(&p);
        let seed = self.cfg.seed;
        let mc = seqkl::mc_sft_loss(&teacher, &student, o.samples, seed)?;
        let kl_csv = format!(
            "teacher,student,kl,ce,entropy,mc_sft_loss,samples,seed\n{t_name},{s_name},{kl},{ce},{h},{mc},{},{seed}\n",
            o.samples
        );

        let (coverage_lm, coverage_name) = match &o.teacher_lm {
            Some(_) => (teacher, t_name),
            None => (seqkl::coverage_toy()?, "coverage_toy".to_owned()),
        };
        let mut coverage_csv = String::from("model,temperature,draws,trials,seed,mean_coverage\n");
        for &t in &o.coverage_temperatures {
            let c = seqkl::support_coverage(&coverage_lm, t, o.coverage_draws, o.coverage_trials, seed)?;
            let _ = writeln!(
                coverage_csv,
                "{coverage_name},{t},{},{},{seed},{c}",
                o.coverage_draws, o.coverage_trials
            );
        }
        Ok(vec![
            self.write_text(files::ORACLE_KL, &kl_csv)?,
            self.write_text(files::ORACLE_COVERAGE, &coverage_csv)?,
        ])
    }
}

/// Builds the score record of `response` from one tokenization per model
/// (teacher, student, then optionally distilled).
pub fn score_record(
    response: &ResponseRecord,
    tokenizations: &[Vec<TokenSpan>],
    seg: &segmenter::SegmenterConfig,
) -> std::result::Result<ScoreRecord, String> {
    if tokenizations.len() < 2 {
        return Err("need teacher and student tokenizations".into());
    }
    let spans = segmenter::segment(&response.text, seg).map_err(|e| e.to_string())?;
    let refs: Vec<&[TokenSpan]> = tokenizations.iter().map(Vec::as_slice).collect();
    let spans = segmenter::coalesce_for_tokenizations(&spans, &refs).map_err(|e| e.to_string())?;
    let ranges = refs
        .iter()
        .map(|t| segmenter::assign_tokens(&spans, t))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let lp = |m: usize, range: std::ops::Range<usize>| -> std::result::Result<f64, String> {
        let values: Vec<f64> = refs[m][range].iter().map(|t| t.logprob).collect();
        likelihood::mean_logprob(&values).map_err(|e| e.to_string())
    };
    let distilled = refs.len() > 2;
    let sentences = spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SentenceScore {
                index: i,
                char_start: s.char_start,
                char_end: s.char_end,
                teacher_tokens: ranges[0][i].len(),
                mean_lp_teacher: lp(0, ranges[0][i].clone())?,
                mean_lp_student: lp(1, ranges[1][i].clone())?,
                mean_lp_distilled: if distilled { Some(lp(2, ranges[2][i].clone())?) } else { None },
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(ScoreRecord {
        response_id: response.id.clone(),
        question_id: response.question_id.clone(),
        temperature: response.temperature,
        is_correct: response.is_correct,
        mean_lp_teacher: lp(0, 0..refs[0].len())?,
        mean_lp_student: lp(1, 0..refs[1].len())?,
        mean_lp_distilled: if distilled { Some(lp(2, 0..refs[2].len())?) } else { None },
        sentences,
    })
}
