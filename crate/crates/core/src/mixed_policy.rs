//! Mixed-policy examples: the student regenerates under a length cap, its
//! cut-off responses are truncated past the half-way token and the teacher
//! continues from the truncated prefix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chars;
use crate::corpus::{FieldError, FinishReason, ModelRole, QuestionRecord, Record, ResponseRecord, TrainingExample};
use crate::filters::{self, FilterConfig, TokenCounter};
use crate::gateway::{Gateway, GatewayError, GenerationRequest, SampleJob};
use crate::util::{fill_template, stable_hash};

pub const DEFAULT_CAP_FACTOR: f64 = 1.5;
pub const DEFAULT_CONTINUATION_TEMPLATE: &str = "{prompt}\n{prefix}";
pub const DEFAULT_CONTINUATION_MAX_TOKENS: usize = 32_768;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixedPolicyError {
    #[error("cap_factor must exceed 1, got {0}")]
    BadCapFactor(f64),
    #[error("teacher length for question `{0}` must be positive")]
    ZeroTeacherLength(String),
    #[error("bin edges must be strictly ascending with at least two entries")]
    BadBins,
    #[error("record `{id}` has teacher length {length}, outside the bins")]
    OutsideBins { id: String, length: usize },
    #[error("record `{0}` has no teacher length")]
    MissingLength(String),
    #[error("record `{id}`: boundary {boundary} is outside a {len}-character target")]
    BoundaryOutOfRange { id: String, boundary: usize, len: usize },
    #[error("record `{0}` refers to an unknown question")]
    UnknownQuestion(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedPolicyConfig {
    pub cap_factor: f64,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub top_p: f64,
    /// Teacher prompt with `{prompt}` and `{prefix}` placeholders.
    pub continuation_template: String,
    pub continuation_max_tokens: usize,
    pub mask_prefix: bool,
    /// Teacher-length bin edges for the cut-off table.
    pub bin_edges: Vec<usize>,
}

impl Default for MixedPolicyConfig {
    fn default() -> Self {
        Self {
            cap_factor: DEFAULT_CAP_FACTOR,
            student_temperature: 1.0,
            teacher_temperature: 1.0,
            top_p: 1.0,
            continuation_template: DEFAULT_CONTINUATION_TEMPLATE.into(),
            continuation_max_tokens: DEFAULT_CONTINUATION_MAX_TOKENS,
            mask_prefix: false,
            bin_edges: vec![0, 1024, 2048, 4096, 8192, 16384, 32768, 65536],
        }
    }
}

/// Student token cap for a teacher solution of `teacher_length` tokens.
pub fn regeneration_cap(teacher_length: usize, cap_factor: f64) -> usize {
    (cap_factor * teacher_length as f64).ceil() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegenerationInput<'a> {
    pub question: &'a QuestionRecord,
    pub teacher_length: usize,
}

fn derived_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut bytes: Vec<&[u8]> = vec![b"seed"];
    let s = seed.to_le_bytes();
    bytes.push(&s);
    bytes.extend(parts.iter().map(|p| p.as_bytes()));
    stable_hash(&bytes)
}

/// Samples one capped student response per question. Failures are returned per question.
pub fn regenerate(
    inputs: &[RegenerationInput<'_>],
    gateway: &Gateway,
    student_model: &str,
    cfg: &MixedPolicyConfig,
    seed: u64,
) -> Result<Vec<Result<ResponseRecord, GatewayError>>, MixedPolicyError> {
    if !(cfg.cap_factor > 1.0) {
        return Err(MixedPolicyError::BadCapFactor(cfg.cap_factor));
    }
    if let Some(i) = inputs.iter().find(|i| i.teacher_length == 0) {
        return Err(MixedPolicyError::ZeroTeacherLength(i.question.id.clone()));
    }
    let jobs: Vec<SampleJob> = inputs
        .iter()
        .map(|i| SampleJob {
            question_id: i.question.id.clone(),
            role: ModelRole::Student,
            request: GenerationRequest {
                model_id: student_model.to_owned(),
                prompt: i.question.prompt.clone(),
                temperature: cfg.student_temperature,
                top_p: cfg.top_p,
                max_tokens: regeneration_cap(i.teacher_length, cfg.cap_factor),
                n: 1,
                seed: Some(derived_seed(seed, &["regenerate", &i.question.id])),
            },
        })
        .collect();
    Ok(gateway
        .sample_many(&jobs)
        .into_iter()
        .map(|r| r.map(|mut v| v.remove(0)))
        .collect())
}

/// Inclusive cut-index range `[ceil(L/2), L-1]`, or `None` when `L < 2`.
pub fn cut_bounds(token_count: usize) -> Option<(usize, usize)> {
    (token_count >= 2).then(|| (token_count.div_ceil(2), token_count - 1))
}

pub fn draw_cut_index<R: Rng>(token_count: usize, rng: &mut R) -> Option<usize> {
    cut_bounds(token_count).map(|(lo, hi)| rng.gen_range(lo..=hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedPolicyRecord {
    pub id: String,
    pub question_id: String,
    pub student_prefix: String,
    pub teacher_continuation: String,
    pub boundary_char: usize,
    pub cut_token_index: usize,
    pub mask_prefix: bool,
    pub source_student_response_id: String,
}

impl MixedPolicyRecord {
    pub fn target(&self) -> String {
        format!("{}{}", self.student_prefix, self.teacher_continuation)
    }
}

impl Record for MixedPolicyRecord {
    const KIND: &'static str = "mixed_policy";

    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.student_prefix.is_empty() {
            return Err(FieldError::new("student_prefix", "must be non-empty"));
        }
        if self.teacher_continuation.is_empty() {
            return Err(FieldError::new("teacher_continuation", "must be non-empty"));
        }
        if self.boundary_char != chars::char_len(&self.student_prefix) {
            return Err(FieldError::new(
                "boundary_char",
                "must equal the character length of student_prefix",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationFailure {
    /// Student response lacks tokens or has fewer than two.
    TooShort,
    Transport,
    EmptyContinuation,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedRejection {
    pub response_id: String,
    pub failure: ContinuationFailure,
    /// Filter reason when `failure` is `filtered`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_reason: Option<filters::RejectReason>,
    pub diagnostics: String,
}

impl Record for MixedRejection {
    const KIND: &'static str = "mixed_rejection";

    fn record_id(&self) -> Option<&str> {
        Some(&self.response_id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        Ok(())
    }
}

impl MixedRejection {
    /// Key under which the rejection is counted in reports.
    pub fn reason_key(&self) -> String {
        match (self.failure, self.filter_reason) {
            (ContinuationFailure::Filtered, Some(r)) => r.as_str().to_owned(),
            (ContinuationFailure::TooShort, _) => "too_short".into(),
            (ContinuationFailure::Transport, _) => "transport".into(),
            (ContinuationFailure::EmptyContinuation, _) => "empty_continuation".into(),
            (ContinuationFailure::Filtered, None) => "filtered".into(),
        }
    }
}

pub struct ContinuationContext<'a> {
    pub gateway: &'a Gateway,
    pub teacher_model: &'a str,
    pub cfg: &'a MixedPolicyConfig,
    pub filter: &'a FilterConfig,
    pub counter: &'a dyn TokenCounter,
    pub seed: u64,
}

/// Truncates one cut-off student response and asks the teacher to continue it.
pub fn truncate_and_continue(
    student: &ResponseRecord,
    question: &QuestionRecord,
    ctx: &ContinuationContext<'_>,
) -> Result<MixedPolicyRecord, MixedRejection> {
    let reject = |failure, filter_reason, diagnostics: String| MixedRejection {
        response_id: student.id.clone(),
        failure,
        filter_reason,
        diagnostics,
    };
    let tokens = student.tokens.as_deref().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(ctx.seed, &["cut", &student.id]));
    let Some(cut) = draw_cut_index(tokens.len(), &mut rng) else {
        return Err(reject(
            ContinuationFailure::TooShort,
            None,
            format!("{} tokens; at least 2 are needed", tokens.len()),
        ));
    };
    let boundary = tokens[cut].char_end;
    let prefix = chars::prefix(&student.text, boundary)
        .expect("token spans lie within the text")
        .to_owned();
    let prompt = fill_template(
        &ctx.cfg.continuation_template,
        &[("prompt", &question.prompt), ("prefix", &prefix)],
    );
    let job = SampleJob {
        question_id: question.id.clone(),
        role: ModelRole::Teacher,
        request: GenerationRequest {
            model_id: ctx.teacher_model.to_owned(),
            prompt,
            temperature: ctx.cfg.teacher_temperature,
            top_p: ctx.cfg.top_p,
            max_tokens: ctx.cfg.continuation_max_tokens,
            n: 1,
            seed: Some(derived_seed(ctx.seed, &["continue", &student.id])),
        },
    };
    let continuation = match ctx.gateway.sample(&job) {
        Ok(mut v) => v.remove(0).text,
        Err(e) => return Err(reject(ContinuationFailure::Transport, None, e.to_string())),
    };
    if continuation.is_empty() {
        return Err(reject(
            ContinuationFailure::EmptyContinuation,
            None,
            "teacher returned no text".into(),
        ));
    }
    let full = format!("{prefix}{continuation}");
    match filters::check_text(&full, &question.prompt, ctx.filter, ctx.counter) {
        Ok(text) if text == full => {}
        Ok(_) => {
            return Err(reject(
                ContinuationFailure::Filtered,
                Some(filters::RejectReason::MalformedMarkup),
                "combined text is not in normalized form".into(),
            ))
        }
        Err(v) => {
            return Err(reject(
                ContinuationFailure::Filtered,
                v.reasons.first().copied(),
                v.diagnostics.unwrap_or_default(),
            ))
        }
    }
    Ok(MixedPolicyRecord {
        id: format!("{}/mixed", student.id),
        question_id: question.id.clone(),
        boundary_char: chars::char_len(&prefix),
        student_prefix: prefix,
        teacher_continuation: continuation,
        cut_token_index: cut,
        mask_prefix: ctx.cfg.mask_prefix,
        source_student_response_id: student.id.clone(),
    })
}

/// Counts for one mixed-policy run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedPolicyReport {
    pub questions: usize,
    pub regenerated: usize,
    pub regeneration_failures: usize,
    pub truncated: usize,
    pub retained: usize,
    pub rejected: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl Record for MixedPolicyReport {
    const KIND: &'static str = "mixed_policy_report";

    fn record_id(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), FieldError> {
        if !(self.retained <= self.truncated && self.truncated <= self.regenerated) {
            return Err(FieldError::new("retained", "need retained <= truncated <= regenerated"));
        }
        if self.retained + self.rejected != self.truncated {
            return Err(FieldError::new("rejected", "retained + rejected must equal truncated"));
        }
        if self.reasons.values().sum::<usize>() != self.rejected {
            return Err(FieldError::new("reasons", "must sum to rejected"));
        }
        Ok(())
    }
}

/// Continues every cut-off response in `students`; output is sorted by record id.
pub fn continue_batch(
    students: &[ResponseRecord],
    questions: &BTreeMap<String, QuestionRecord>,
    ctx: &ContinuationContext<'_>,
) -> Result<(Vec<MixedPolicyRecord>, Vec<MixedRejection>), MixedPolicyError> {
    let cut_off: Vec<&ResponseRecord> = students
        .iter()
        .filter(|r| r.finish_reason == FinishReason::Length)
        .collect();
    for r in &cut_off {
        if !questions.contains_key(&r.question_id) {
            return Err(MixedPolicyError::UnknownQuestion(r.id.clone()));
        }
    }
    let results = ctx
        .gateway
        .map_bounded(&cut_off, |r| truncate_and_continue(r, &questions[&r.question_id], ctx));
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for r in results {
        match r {
            Ok(m) => kept.push(m),
            Err(e) => rejected.push(e),
        }
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    rejected.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    Ok((kept, rejected))
}

/// Training examples with target `prefix + continuation`; `mask` excludes the prefix from the loss.
pub fn emit_training_examples(
    records: &[MixedPolicyRecord],
    questions: &BTreeMap<String, QuestionRecord>,
    mask: bool,
) -> Result<Vec<TrainingExample>, MixedPolicyError> {
    records
        .iter()
        .map(|r| {
            let target = r.target();
            let len = chars::char_len(&target);
            if r.boundary_char == 0 || r.boundary_char > len {
                return Err(MixedPolicyError::BoundaryOutOfRange {
                    id: r.id.clone(),
                    boundary: r.boundary_char,
                    len,
                });
            }
            let q = questions
                .get(&r.question_id)
                .ok_or_else(|| MixedPolicyError::UnknownQuestion(r.id.clone()))?;
            Ok(TrainingExample {
                id: r.id.clone(),
                question_id: r.question_id.clone(),
                prompt: q.prompt.clone(),
                target,
                loss_mask: if mask { vec![[0, r.boundary_char]] } else { Vec::new() },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffBin {
    pub length_lo: usize,
    pub length_hi: usize,
    pub total: usize,
    pub cut_off: usize,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffTable {
    pub bins: Vec<CutoffBin>,
}

impl CutoffTable {
    /// CSV `length_lo,length_hi,total,cut_off,ratio`; empty bins leave `ratio` blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length_lo,length_hi,total,cut_off,ratio\n");
        for b in &self.bins {
            let ratio = b.ratio.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", b.length_lo, b.length_hi, b.total, b.cut_off, ratio);
        }
        out
    }
}

/// Bin `i` covers `[edges[i], edges[i+1])`; the last bin also includes its upper edge.
pub fn bin_index(edges: &[usize], length: usize) -> Option<usize> {
    let last = edges.len().checked_sub(2)?;
    if length < edges[0] || length > edges[last + 1] {
        return None;
    }
    Some((0..=last).find(|&i| length < edges[i + 1]).unwrap_or(last))
}

/// Cut-off ratio of student regenerations by teacher-length bin.
pub fn cutoff_rate(
    records: &[ResponseRecord],
    teacher_lengths: &BTreeMap<String, usize>,
    edges: &[usize],
) -> Result<CutoffTable, MixedPolicyError> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MixedPolicyError::BadBins);
    }
    let mut bins: Vec<CutoffBin> = edges
        .windows(2)
        .map(|w| CutoffBin {
            length_lo: w[0],
            length_hi: w[1],
            total: 0,
            cut_off: 0,
            ratio: None,
        })
        .collect();
    for r in records {
        let length = *teacher_lengths
            .get(&r.question_id)
            .ok_or_else(|| MixedPolicyError::MissingLength(r.id.clone()))?;
        let i = bin_index(edges, length).ok_or_else(|| MixedPolicyError::OutsideBins {
            id: r.id.clone(),
            length,
        })?;
        bins[i].total += 1;
        if r.finish_reason == FinishReason::Length {
            bins[i].cut_off += 1;
        }
    }
    for b in &mut bins {
        b.ratio = (b.total > 0).then(|| b.cut_off as f64 / b.total as f64);
    }
    Ok(CutoffTable { bins })
}
