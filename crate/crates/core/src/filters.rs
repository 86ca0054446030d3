//! Response-quality gates: structure (with channel-to-think rewriting),
//! rendered length and within-response repetition.
//!
//! [`filter_pipeline`] runs the gates in that order on every record; the
//! first failing gate decides the record's counted reason.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chars;
use crate::corpus::{FieldError, Record, ResponseRecord};
use crate::gateway::{Gateway, GatewayError, TokenCount};

pub const DEFAULT_MAX_TOKENS: usize = 65_536;
pub const DEFAULT_TEMPLATE: &str = "{prompt}\n{response}";
pub const DEFAULT_NGRAM_LEN: usize = 8;
pub const DEFAULT_MIN_REPEATS: usize = 3;
pub const DEFAULT_PARAGRAPH_REPEATS: usize = 2;
pub const MIN_PARAGRAPH_CHARS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooLong,
    FunctionCall,
    MissingThink,
    MissingAnswer,
    RepetitionNgram,
    RepetitionParagraph,
    /// Markup that cannot be parsed into one analysis and one final segment.
    MalformedMarkup,
    /// The record could not be evaluated (for example the token counter failed).
    Error,
}

impl RejectReason {
    pub const ALL: [RejectReason; 8] = [
        RejectReason::TooLong,
        RejectReason::FunctionCall,
        RejectReason::MissingThink,
        RejectReason::MissingAnswer,
        RejectReason::RepetitionNgram,
        RejectReason::RepetitionParagraph,
        RejectReason::MalformedMarkup,
        RejectReason::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooLong => "too_long",
            RejectReason::FunctionCall => "function_call",
            RejectReason::MissingThink => "missing_think",
            RejectReason::MissingAnswer => "missing_answer",
            RejectReason::RepetitionNgram => "repetition_ngram",
            RejectReason::RepetitionParagraph => "repetition_paragraph",
            RejectReason::MalformedMarkup => "malformed_markup",
            RejectReason::Error => "error",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub kept: bool,
    pub reasons: Vec<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

impl FilterVerdict {
    pub fn keep() -> Self {
        Self {
            kept: true,
            reasons: Vec::new(),
            diagnostics: None,
        }
    }

    pub fn reject(reason: RejectReason, diagnostics: impl Into<String>) -> Self {
        Self {
            kept: false,
            reasons: vec![reason],
            diagnostics: Some(diagnostics.into()),
        }
    }
}

/// Delimiters of the teacher's native output format and of the normalized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerTable {
    pub analysis_open: String,
    pub final_open: String,
    /// Optional terminators allowed at the very end of the final segment.
    pub final_close: Vec<String>,
    /// Any occurrence marks a tool call.
    pub tool_markers: Vec<String>,
    /// Prefix shared by all native markers; stray occurrences are malformed.
    pub marker_prefix: String,
    pub think_open: String,
    pub think_close: String,
}

impl Default for MarkerTable {
    fn default() -> Self {
        Self {
            analysis_open: "<|channel|>analysis<|message|>".into(),
            final_open: "<|end|><|start|>assistant<|channel|>final<|message|>".into(),
            final_close: vec!["<|return|>".into(), "<|end|>".into()],
            tool_markers: vec!["<|call|>".into(), " to=functions.".into()],
            marker_prefix: "<|".into(),
            think_open: "<think>".into(),
            think_close: "</think>".into(),
        }
    }
}

fn malformed(text: &str, byte: usize, what: &str) -> FilterVerdict {
    FilterVerdict::reject(
        RejectReason::MalformedMarkup,
        format!("{what} at character {}", chars::char_offset_of_byte(text, byte)),
    )
}

/// Rewrites native output to `<think>analysis</think>final`.
///
/// Text already in normalized form is validated and returned unchanged.
pub fn structure_filter(raw: &str, markers: &MarkerTable) -> Result<String, FilterVerdict> {
    for m in markers.tool_markers.iter().filter(|m| !m.is_empty()) {
        if let Some(pos) = raw.find(m.as_str()) {
            return Err(FilterVerdict::reject(
                RejectReason::FunctionCall,
                format!(
                    "tool-call marker {m:?} at character {}",
                    chars::char_offset_of_byte(raw, pos)
                ),
            ));
        }
    }
    let (open, close) = (markers.think_open.as_str(), markers.think_close.as_str());
    let leading = raw.len() - raw.trim_start().len();
    if raw[leading..].starts_with(open) {
        return normalized_form(raw, leading, markers);
    }

    let Some(a) = raw.find(&markers.analysis_open) else {
        return Err(FilterVerdict::reject(
            RejectReason::MissingThink,
            "no analysis segment",
        ));
    };
    if !raw[..a].trim().is_empty() {
        return Err(malformed(raw, leading, "text before the analysis segment"));
    }
    let body_start = a + markers.analysis_open.len();
    let Some(f_rel) = raw[body_start..].find(&markers.final_open) else {
        return Err(FilterVerdict::reject(
            RejectReason::MissingAnswer,
            "no final segment",
        ));
    };
    let f = body_start + f_rel;
    let analysis = &raw[body_start..f];
    let final_start = f + markers.final_open.len();
    let mut final_end = raw.len();
    for c in markers.final_close.iter().filter(|c| !c.is_empty()) {
        if raw[final_start..].ends_with(c.as_str()) {
            final_end = raw.len() - c.len();
            break;
        }
    }
    let answer = &raw[final_start..final_end];

    for (segment, offset) in [(analysis, body_start), (answer, final_start)] {
        for token in [markers.marker_prefix.as_str(), open, close] {
            if token.is_empty() {
                continue;
            }
            if let Some(p) = segment.find(token) {
                return Err(malformed(raw, offset + p, "unexpected marker"));
            }
        }
    }
    if analysis.trim().is_empty() {
        return Err(FilterVerdict::reject(
            RejectReason::MissingThink,
            "empty analysis segment",
        ));
    }
    if answer.trim().is_empty() {
        return Err(FilterVerdict::reject(
            RejectReason::MissingAnswer,
            "empty final segment",
        ));
    }
    Ok(format!("{open}{analysis}{close}{answer}"))
}

fn normalized_form(raw: &str, start: usize, markers: &MarkerTable) -> Result<String, FilterVerdict> {
    let (open, close) = (markers.think_open.as_str(), markers.think_close.as_str());
    let body = start + open.len();
    let Some(c_rel) = raw[body..].find(close) else {
        return Err(malformed(raw, start, "unclosed think block"));
    };
    let c = body + c_rel;
    let answer_start = c + close.len();
    let analysis = &raw[body..c];
    let answer = &raw[answer_start..];
    if let Some(p) = analysis.find(open) {
        return Err(malformed(raw, body + p, "nested think block"));
    }
    if let Some(p) = answer.find(open).or_else(|| answer.find(close)) {
        return Err(malformed(raw, answer_start + p, "think marker after the think block"));
    }
    if !markers.marker_prefix.is_empty() {
        if let Some(p) = raw.find(&markers.marker_prefix) {
            return Err(malformed(raw, p, "native marker in normalized text"));
        }
    }
    if analysis.trim().is_empty() {
        return Err(FilterVerdict::reject(RejectReason::MissingThink, "empty think block"));
    }
    if answer.trim().is_empty() {
        return Err(FilterVerdict::reject(RejectReason::MissingAnswer, "nothing after the think block"));
    }
    Ok(raw.to_owned())
}

/// Counts student-model tokens of rendered training text.
pub trait TokenCounter: Sync {
    fn count(&self, text: &str) -> Result<TokenCount, GatewayError>;
}

/// Exact counter backed by the gateway's tokenize endpoint.
pub struct GatewayCounter<'a> {
    pub gateway: &'a Gateway,
    pub model_id: String,
}

impl TokenCounter for GatewayCounter<'_> {
    fn count(&self, text: &str) -> Result<TokenCount, GatewayError> {
        self.gateway.count_tokens(&self.model_id, text)
    }
}

/// Whitespace word count; only usable with `allow_approximate`.
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> Result<TokenCount, GatewayError> {
        Ok(crate::gateway::approximate_token_count(text))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthConfig {
    pub max_tokens: usize,
    /// Training-text template with `{prompt}` and `{response}` placeholders.
    pub template: String,
    pub allow_approximate: bool,
}

impl Default for LengthConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            template: DEFAULT_TEMPLATE.into(),
            allow_approximate: false,
        }
    }
}

pub fn render_template(template: &str, prompt: &str, response: &str) -> String {
    crate::util::fill_template(template, &[("prompt", prompt), ("response", response)])
}

/// Keeps the response iff its rendered training text has at most `max_tokens` tokens.
pub fn length_filter(
    text: &str,
    prompt: &str,
    cfg: &LengthConfig,
    counter: &dyn TokenCounter,
) -> Result<FilterVerdict, GatewayError> {
    let rendered = render_template(&cfg.template, prompt, text);
    let count = counter.count(&rendered)?;
    if count.approximate && !cfg.allow_approximate {
        return Err(GatewayError::Capability(
            "token counter is approximate; set allow_approximate to accept it".into(),
        ));
    }
    Ok(if count.count <= cfg.max_tokens {
        FilterVerdict::keep()
    } else {
        FilterVerdict::reject(
            RejectReason::TooLong,
            format!("{} tokens exceeds {}", count.count, cfg.max_tokens),
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepetitionConfig {
    pub ngram_len: usize,
    pub min_repeats: usize,
    pub paragraph_repeats: usize,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self {
            ngram_len: DEFAULT_NGRAM_LEN,
            min_repeats: DEFAULT_MIN_REPEATS,
            paragraph_repeats: DEFAULT_PARAGRAPH_REPEATS,
        }
    }
}

impl RepetitionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.ngram_len == 0 || self.min_repeats == 0 || self.paragraph_repeats == 0 {
            return Err("repetition parameters must all be >= 1".into());
        }
        Ok(())
    }
}

/// Blank-line-delimited, whitespace-trimmed paragraphs.
pub fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        match (blank, start) {
            (true, Some(s)) => {
                out.push(text[s..offset].trim());
                start = None;
            }
            (false, None) => start = Some(offset),
            _ => {}
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push(text[s..].trim());
    }
    out
}

/// Most frequent repeated unit, ties broken by first occurrence.
fn worst<K: std::hash::Hash + Eq + Clone>(items: impl Iterator<Item = K>) -> Option<(K, usize)> {
    let mut counts: HashMap<K, (usize, usize)> = HashMap::new();
    for (pos, item) in items.enumerate() {
        counts.entry(item).or_insert((0, pos)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(k, (n, _))| (k, n))
}

/// Rejects word n-grams or paragraphs repeated too often.
pub fn repetition_filter(text: &str, cfg: &RepetitionConfig) -> FilterVerdict {
    let mut reasons = Vec::new();
    let mut notes = Vec::new();
    let words: Vec<&str> = text.split_whitespace().collect();
    if cfg.ngram_len >= 1 && words.len() >= cfg.ngram_len {
        if let Some((gram, n)) = worst(words.windows(cfg.ngram_len)) {
            if n >= cfg.min_repeats {
                reasons.push(RejectReason::RepetitionNgram);
                notes.push(format!("{:?} occurs {n} times", gram.join(" ")));
            }
        }
    }
    let paras = paragraphs(text)
        .into_iter()
        .filter(|p| chars::char_len(p) >= MIN_PARAGRAPH_CHARS);
    if let Some((para, n)) = worst(paras) {
        if n >= cfg.paragraph_repeats {
            reasons.push(RejectReason::RepetitionParagraph);
            let preview: String = para.chars().take(60).collect();
            notes.push(format!("paragraph {preview:?} occurs {n} times"));
        }
    }
    if reasons.is_empty() {
        FilterVerdict::keep()
    } else {
        FilterVerdict {
            kept: false,
            reasons,
            diagnostics: Some(notes.join("; ")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub markers: MarkerTable,
    pub length: LengthConfig,
    pub repetition: RepetitionConfig,
}

/// Runs all gates on one text; returns the normalized text when kept.
pub fn check_text(
    raw: &str,
    prompt: &str,
    cfg: &FilterConfig,
    counter: &dyn TokenCounter,
) -> Result<String, FilterVerdict> {
    let normalized = structure_filter(raw, &cfg.markers)?;
    match length_filter(&normalized, prompt, &cfg.length, counter) {
        Ok(v) if !v.kept => return Err(v),
        Ok(_) => {}
        Err(e) => return Err(FilterVerdict::reject(RejectReason::Error, e.to_string())),
    }
    let v = repetition_filter(&normalized, &cfg.repetition);
    if !v.kept {
        return Err(v);
    }
    Ok(normalized)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonCounts {
    pub too_long: usize,
    pub function_call: usize,
    pub missing_think: usize,
    pub missing_answer: usize,
    pub repetition_ngram: usize,
    pub repetition_paragraph: usize,
    pub malformed_markup: usize,
    pub error: usize,
}

impl ReasonCounts {
    pub fn get(&self, r: RejectReason) -> usize {
        match r {
            RejectReason::TooLong => self.too_long,
            RejectReason::FunctionCall => self.function_call,
            RejectReason::MissingThink => self.missing_think,
            RejectReason::MissingAnswer => self.missing_answer,
            RejectReason::RepetitionNgram => self.repetition_ngram,
            RejectReason::RepetitionParagraph => self.repetition_paragraph,
            RejectReason::MalformedMarkup => self.malformed_markup,
            RejectReason::Error => self.error,
        }
    }

    fn slot(&mut self, r: RejectReason) -> &mut usize {
        match r {
            RejectReason::TooLong => &mut self.too_long,
            RejectReason::FunctionCall => &mut self.function_call,
            RejectReason::MissingThink => &mut self.missing_think,
            RejectReason::MissingAnswer => &mut self.missing_answer,
            RejectReason::RepetitionNgram => &mut self.repetition_ngram,
            RejectReason::RepetitionParagraph => &mut self.repetition_paragraph,
            RejectReason::MalformedMarkup => &mut self.malformed_markup,
            RejectReason::Error => &mut self.error,
        }
    }

    pub fn add(&mut self, r: RejectReason) {
        *self.slot(r) += 1;
    }

    pub fn total(&self) -> usize {
        RejectReason::ALL.iter().map(|&r| self.get(r)).sum()
    }

    /// Non-zero counts in declaration order.
    pub fn nonzero(&self) -> Vec<(RejectReason, usize)> {
        RejectReason::ALL
            .iter()
            .map(|&r| (r, self.get(r)))
            .filter(|&(_, n)| n > 0)
            .collect()
    }
}

/// Summary of one filter run. Each rejected record counts once, under its first reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub rejected_count: usize,
    pub reasons: ReasonCounts,
}

impl Record for RejectionReport {
    const KIND: &'static str = "rejection_report";

    fn record_id(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.kept_count + self.rejected_count != self.input_count {
            return Err(FieldError::new("input_count", "kept + rejected must equal input"));
        }
        if self.reasons.total() != self.rejected_count {
            return Err(FieldError::new("reasons", "reason counts must sum to rejected_count"));
        }
        Ok(())
    }
}

/// Per-record outcome, written with `--verbose`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub response_id: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

impl Record for VerdictRecord {
    const KIND: &'static str = "verdict";

    fn record_id(&self) -> Option<&str> {
        Some(&self.response_id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.kept != self.reasons.is_empty() {
            return Err(FieldError::new("kept", "must be true iff reasons is empty"));
        }
        Ok(())
    }
}

pub struct FilterOutcome {
    pub kept: Vec<ResponseRecord>,
    pub report: RejectionReport,
    pub verdicts: Vec<VerdictRecord>,
}

/// Filters `records` in parallel; kept records keep input order.
///
/// `prompt_of` supplies the question prompt used by the length gate. A record
/// whose text is rewritten loses its token spans, which no longer align.
pub fn filter_pipeline<F>(
    records: &[ResponseRecord],
    prompt_of: F,
    cfg: &FilterConfig,
    counter: &dyn TokenCounter,
) -> FilterOutcome
where
    F: Fn(&ResponseRecord) -> Option<String> + Sync,
{
    let results: Vec<Result<String, FilterVerdict>> = records
        .par_iter()
        .map(|r| match prompt_of(r) {
            Some(prompt) => check_text(&r.text, &prompt, cfg, counter),
            None => Err(FilterVerdict::reject(
                RejectReason::Error,
                format!("no prompt for question `{}`", r.question_id),
            )),
        })
        .collect();

    let mut out = FilterOutcome {
        kept: Vec::new(),
        report: RejectionReport {
            input_count: records.len(),
            ..Default::default()
        },
        verdicts: Vec::with_capacity(records.len()),
    };
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(text) => {
                let mut kept = record.clone();
                if kept.text != text {
                    kept.text = text;
                    kept.tokens = None;
                }
                out.kept.push(kept);
                out.verdicts.push(VerdictRecord {
                    response_id: record.id.clone(),
                    kept: true,
                    reasons: Vec::new(),
                    diagnostics: None,
                });
            }
            Err(v) => {
                out.report.reasons.add(v.reasons[0]);
                out.verdicts.push(VerdictRecord {
                    response_id: record.id.clone(),
                    kept: false,
                    reasons: v.reasons,
                    diagnostics: v.diagnostics,
                });
            }
        }
    }
    out.report.kept_count = out.kept.len();
    out.report.rejected_count = out.report.input_count - out.report.kept_count;
    out
}
