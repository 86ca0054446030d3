//! Record schemas and line-delimited record files.
//!
//! Every line is one JSON object whose first key is the schema version tag
//! `"v": 1`, followed by the record's fields in declaration order. Optional
//! fields are omitted rather than written as `null`, so serialization is a
//! pure function of field values and identical inputs give identical bytes.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::chars;

pub const SCHEMA_VERSION: u64 = 1;

/// A named field that failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("record {index}: field `{field}`: {message}")]
    Invalid {
        index: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id `{id}` at records {first} and {second}")]
    DuplicateRecord {
        id: String,
        first: usize,
        second: usize,
    },
}

/// A schema that can live in a record file.
pub trait Record: Serialize + DeserializeOwned {
    /// Short schema name used in diagnostics.
    const KIND: &'static str;

    /// Identifier that must be unique within a file, if the schema has one.
    fn record_id(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), FieldError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Math,
    Code,
    Science,
    InstructionFollowing,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub domain: Domain,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
}

impl Record for QuestionRecord {
    const KIND: &'static str = "question";

    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.id.is_empty() {
            return Err(FieldError::new("id", "must be non-empty"));
        }
        Ok(())
    }
}

/// One token of a response with its log-probability and character span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpan {
    pub text: String,
    pub logprob: f64,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Teacher,
    Student,
    Distilled,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Student => "student",
            ModelRole::Distilled => "distilled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    Scored,
    MixedPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub id: String,
    pub question_id: String,
    pub model_id: String,
    pub model_role: ModelRole,
    pub temperature: f64,
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
    pub provenance: Provenance,
}

impl ResponseRecord {
    pub fn token_logprobs(&self) -> Option<Vec<f64>> {
        self.tokens
            .as_ref()
            .map(|t| t.iter().map(|s| s.logprob).collect())
    }
}

impl Record for ResponseRecord {
    const KIND: &'static str = "response";

    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.id.is_empty() {
            return Err(FieldError::new("id", "must be non-empty"));
        }
        if self.question_id.is_empty() {
            return Err(FieldError::new("question_id", "must be non-empty"));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(FieldError::new(
                "temperature",
                format!("must be a non-negative real, got {}", self.temperature),
            ));
        }
        if let Some(tokens) = &self.tokens {
            validate_tiling(&self.text, tokens).map_err(|e| FieldError {
                field: format!("tokens.{}", e.field),
                message: e.message,
            })?;
        }
        Ok(())
    }
}

/// Checks that `tokens` tile `text` exactly, in order, with logprobs ≤ 0.
pub fn validate_tiling(text: &str, tokens: &[TokenSpan]) -> Result<(), FieldError> {
    let table = chars::boundary_table(text);
    let len = table.len() - 1;
    let mut cursor = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        if tok.char_start != cursor {
            return Err(FieldError::new(
                format!("{i}.char_start"),
                format!("expected {cursor}, got {}", tok.char_start),
            ));
        }
        if tok.char_end <= tok.char_start {
            return Err(FieldError::new(
                format!("{i}.char_end"),
                "span must be non-empty",
            ));
        }
        if tok.char_end > len {
            return Err(FieldError::new(
                format!("{i}.char_end"),
                format!("{} exceeds text length {len}", tok.char_end),
            ));
        }
        if text[table[tok.char_start]..table[tok.char_end]] != tok.text {
            return Err(FieldError::new(
                format!("{i}.text"),
                "token text differs from the covered slice of the response",
            ));
        }
        if tok.logprob.is_nan() || tok.logprob > 0.0 {
            return Err(FieldError::new(
                format!("{i}.logprob"),
                format!("must be <= 0, got {}", tok.logprob),
            ));
        }
        cursor = tok.char_end;
    }
    if cursor != len {
        return Err(FieldError::new(
            "length",
            format!("tokens cover {cursor} of {len} characters"),
        ));
    }
    Ok(())
}

/// Half-open character range `[start, end)`.
pub type CharRange = [usize; 2];

/// A rendered supervised example: `prompt` in, `target` as the loss-bearing output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub id: String,
    pub question_id: String,
    pub prompt: String,
    pub target: String,
    /// Character ranges of `target` excluded from the loss.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_mask: Vec<CharRange>,
}

impl TrainingExample {
    /// Complement of `loss_mask` within the target.
    pub fn trainable_regions(&self) -> Vec<CharRange> {
        let len = chars::char_len(&self.target);
        let mut out = Vec::new();
        let mut cursor = 0;
        for &[lo, hi] in &self.loss_mask {
            if lo > cursor {
                out.push([cursor, lo]);
            }
            cursor = cursor.max(hi);
        }
        if cursor < len {
            out.push([cursor, len]);
        }
        out
    }
}

impl Record for TrainingExample {
    const KIND: &'static str = "training_example";

    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        let len = chars::char_len(&self.target);
        let mut prev_end = 0;
        for (i, &[lo, hi]) in self.loss_mask.iter().enumerate() {
            if lo >= hi || hi > len || lo < prev_end {
                return Err(FieldError::new(
                    format!("loss_mask.{i}"),
                    format!("range [{lo}, {hi}) is invalid for a {len}-character target"),
                ));
            }
            prev_end = hi;
        }
        Ok(())
    }
}

/// Serializes one record to its canonical line (without the trailing newline).
pub fn to_line<R: Record>(record: &R) -> Result<String, FieldError> {
    let value = serde_json::to_value(record)
        .map_err(|e| FieldError::new("<record>", e.to_string()))?;
    let Value::Object(fields) = value else {
        return Err(FieldError::new("<record>", "record must serialize to an object"));
    };
    let mut tagged = Map::with_capacity(fields.len() + 1);
    tagged.insert("v".to_owned(), Value::from(SCHEMA_VERSION));
    tagged.extend(fields);
    serde_json::to_string(&Value::Object(tagged))
        .map_err(|e| FieldError::new("<record>", e.to_string()))
}

/// Parses one line into a record and checks its invariants.
pub fn parse_line<R: Record>(line: &str) -> Result<R, FieldError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| FieldError::new("<line>", e.to_string()))?;
    let Value::Object(mut fields) = value else {
        return Err(FieldError::new("<line>", "expected a JSON object"));
    };
    match fields.shift_remove("v") {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(FieldError::new(
                "v",
                format!("unsupported schema version {v}"),
            ))
        }
        None => return Err(FieldError::new("v", "missing schema version tag")),
    }
    let record: R = serde_path_to_error::deserialize(Value::Object(fields)).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." {
            field_from_message(&e.inner().to_string())
        } else {
            path
        };
        FieldError::new(field, e.inner().to_string())
    })?;
    record.validate()?;
    Ok(record)
}

// serde reports "missing field `x`" at the parent path.
fn field_from_message(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "<record>".to_owned())
}

/// Reads every record of `path` in file order.
pub fn read_records<R: Record>(path: &Path) -> Result<Vec<R>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_records(&text)
}

/// Parses record-file contents; line numbers in errors are 1-based.
pub fn parse_records<R: Record>(text: &str) -> Result<Vec<R>, CorpusError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let record: R = parse_line(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            field: e.field,
            message: e.message,
        })?;
        if let Some(id) = record.record_id() {
            if let Some(&first_line) = seen.get(id) {
                return Err(CorpusError::DuplicateId {
                    id: id.to_owned(),
                    first_line,
                    second_line: line_no,
                });
            }
            seen.insert(id.to_owned(), line_no);
        }
        records.push(record);
    }
    Ok(records)
}

/// Renders `records` to file contents, validating everything first.
pub fn render_records<R: Record>(records: &[R]) -> Result<String, CorpusError> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut out = String::new();
    for (index, record) in records.iter().enumerate() {
        let invalid = |e: FieldError| CorpusError::Invalid {
            index,
            field: e.field,
            message: e.message,
        };
        record.validate().map_err(invalid)?;
        if let Some(id) = record.record_id() {
            if let Some(&first) = seen.get(id) {
                return Err(CorpusError::DuplicateRecord {
                    id: id.to_owned(),
                    first,
                    second: index,
                });
            }
            seen.insert(id, index);
        }
        out.push_str(&to_line(record).map_err(invalid)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `records` one per line. Nothing is written if any record is invalid.
pub fn write_records<R: Record>(records: &[R], path: &Path) -> Result<usize, CorpusError> {
    let body = render_records(records)?;
    let io_err = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    writer.write_all(body.as_bytes()).map_err(io_err)?;
    writer.flush().map_err(io_err)?;
    Ok(records.len())
}
