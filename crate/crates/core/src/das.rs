//! Divergence-aware selection of teacher candidates.
//!
//! A candidate's score is the token-weighted fraction of its sentences whose
//! teacher gap (teacher mean logprob minus student mean logprob) reaches
//! `tau`. Only the teacher and the pre-distillation student are needed, so
//! scoring happens before any training.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FieldError, Record};
use crate::divergence::teacher_gap;

pub const DEFAULT_QUOTA: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DasError {
    #[error("sentence lists differ in length: teacher {teacher}, student {student}, token counts {counts}")]
    LengthMismatch {
        teacher: usize,
        student: usize,
        counts: usize,
    },
    #[error("a candidate needs at least one sentence")]
    NoSentences,
    #[error("sentence {0} has a zero token count")]
    ZeroTokens(usize),
    #[error("tau must be positive, got {0}")]
    BadTau(f64),
    #[error("{0} must be >= 1")]
    ZeroLimit(&'static str),
}

/// Token-weighted fraction of sentences with `teacher_gap >= tau`.
pub fn das_score(
    teacher_lps: &[f64],
    student_lps: &[f64],
    sentence_token_counts: &[usize],
    tau: f64,
) -> Result<f64, DasError> {
    if teacher_lps.len() != student_lps.len() || teacher_lps.len() != sentence_token_counts.len() {
        return Err(DasError::LengthMismatch {
            teacher: teacher_lps.len(),
            student: student_lps.len(),
            counts: sentence_token_counts.len(),
        });
    }
    if teacher_lps.is_empty() {
        return Err(DasError::NoSentences);
    }
    if !(tau > 0.0) {
        return Err(DasError::BadTau(tau));
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for (i, ((&t, &s), &n)) in teacher_lps
        .iter()
        .zip(student_lps)
        .zip(sentence_token_counts)
        .enumerate()
    {
        if n == 0 {
            return Err(DasError::ZeroTokens(i));
        }
        total += n;
        if teacher_gap(t, s) >= tau {
            hit += n;
        }
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredCandidate {
    pub response_id: String,
    pub question_id: String,
    pub das_score: f64,
    pub sentence_count: usize,
    pub token_count: usize,
    pub temperature: f64,
}

impl Record for ScoredCandidate {
    const KIND: &'static str = "scored_candidate";

    fn record_id(&self) -> Option<&str> {
        Some(&self.response_id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if !(0.0..=1.0).contains(&self.das_score) {
            return Err(FieldError::new(
                "das_score",
                format!("must be in [0, 1], got {}", self.das_score),
            ));
        }
        if self.sentence_count == 0 {
            return Err(FieldError::new("sentence_count", "must be positive"));
        }
        if self.token_count == 0 {
            return Err(FieldError::new("token_count", "must be positive"));
        }
        Ok(())
    }
}

/// One line of a selection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub response_id: String,
    pub question_id: String,
    pub das_score: f64,
    pub temperature: f64,
}

impl Record for SelectionRecord {
    const KIND: &'static str = "selection";

    fn record_id(&self) -> Option<&str> {
        Some(&self.response_id)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if !(0.0..=1.0).contains(&self.das_score) {
            return Err(FieldError::new("das_score", "must be in [0, 1]"));
        }
        Ok(())
    }
}

impl From<&ScoredCandidate> for SelectionRecord {
    fn from(c: &ScoredCandidate) -> Self {
        Self {
            response_id: c.response_id.clone(),
            question_id: c.question_id.clone(),
            das_score: c.das_score,
            temperature: c.temperature,
        }
    }
}

/// Score descending, then response id ascending.
pub fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.das_score
        .total_cmp(&a.das_score)
        .then_with(|| a.response_id.cmp(&b.response_id))
}

/// Keeps at most `quota` per question, then the global top `budget`; result sorted by id.
pub fn select(
    candidates: &[ScoredCandidate],
    budget: usize,
    quota: usize,
) -> Result<Vec<&ScoredCandidate>, DasError> {
    if budget == 0 {
        return Err(DasError::ZeroLimit("budget"));
    }
    if quota == 0 {
        return Err(DasError::ZeroLimit("per-question quota"));
    }
    let mut by_question: BTreeMap<&str, Vec<&ScoredCandidate>> = BTreeMap::new();
    for c in candidates {
        by_question.entry(&c.question_id).or_default().push(c);
    }
    let mut pool: Vec<&ScoredCandidate> = Vec::new();
    for group in by_question.values_mut() {
        group.sort_by(|a, b| rank_order(a, b));
        pool.extend(group.iter().take(quota));
    }
    pool.sort_by(|a, b| rank_order(a, b));
    pool.truncate(budget);
    pool.sort_by(|a, b| a.response_id.cmp(&b.response_id));
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::DEFAULT_TAU;

    fn cand(id: &str, q: &str, score: f64) -> ScoredCandidate {
        ScoredCandidate {
            response_id: id.into(),
            question_id: q.into(),
            das_score: score,
            sentence_count: 1,
            token_count: 1,
            temperature: 0.6,
        }
    }

    #[test]
    fn score_examples() {
        // gaps 1.0, 0.1, 0.9
        let s = das_score(&[-0.1, -0.5, -0.2], &[-1.1, -0.6, -1.1], &[10, 5, 5], DEFAULT_TAU).unwrap();
        assert!((s - 0.75).abs() < 1e-15, "{s}");
        assert_eq!(das_score(&[0.0], &[-5.0], &[3], DEFAULT_TAU).unwrap(), 1.0);
        assert_eq!(das_score(&[0.0], &[0.0], &[3], DEFAULT_TAU).unwrap(), 0.0);
    }

    #[test]
    fn score_errors() {
        assert!(matches!(
            das_score(&[0.0], &[0.0, 0.0], &[1], DEFAULT_TAU),
            Err(DasError::LengthMismatch { .. })
        ));
        assert_eq!(das_score(&[], &[], &[], DEFAULT_TAU), Err(DasError::NoSentences));
        assert_eq!(das_score(&[0.0], &[0.0], &[0], DEFAULT_TAU), Err(DasError::ZeroTokens(0)));
    }

    #[test]
    fn tie_broken_by_id() {
        let c = vec![cand("b", "q1", 0.9), cand("a", "q1", 0.9), cand("c", "q1", 0.5)];
        let ids: Vec<&str> = select(&c, 2, 3).unwrap().iter().map(|c| c.response_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn quota_then_budget() {
        let c = vec![
            cand("q1a", "q1", 0.9),
            cand("q1b", "q1", 0.8),
            cand("q2a", "q2", 0.1),
            cand("q3a", "q3", 0.5),
        ];
        let ids: Vec<&str> = select(&c, 2, 1).unwrap().iter().map(|c| c.response_id.as_str()).collect();
        assert_eq!(ids, vec!["q1a", "q3a"]);
        assert_eq!(select(&c, 100, 5).unwrap().len(), 4);
        assert!(select(&[], 3, 1).unwrap().is_empty());
        assert_eq!(select(&c, 0, 1).unwrap_err(), DasError::ZeroLimit("budget"));
    }
}
