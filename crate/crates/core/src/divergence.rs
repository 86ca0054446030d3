//! Sentence source types and position-wise correctness profiles.
//!
//! Each sentence of a response is labeled by comparing its per-token mean
//! logprob under a teacher, the pre-distillation student and the distilled
//! model. All decisions depend on logprob differences only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ln 2: the teacher's per-token geometric mean is at least twice the student's.
pub const DEFAULT_TAU: f64 = std::f64::consts::LN_2;
pub const DEFAULT_MAX_POSITION: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivergenceError {
    #[error("sentence {0} has no distilled-model logprob; classification needs all three models")]
    MissingDistilled(usize),
    #[error("tau must be positive, got {0}")]
    BadTau(f64),
    #[error("position {position} has no {side} support; lower max_position")]
    NoSupport { position: usize, side: &'static str },
    #[error("profiles do not cover position {0}")]
    MissingPosition(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceTriple {
    pub sentence_index: usize,
    pub mean_lp_teacher: f64,
    pub mean_lp_student: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lp_distilled: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceType {
    Teacher,
    Student,
    Shared,
    Boosted,
}

impl SentenceType {
    pub const ALL: [SentenceType; 4] = [
        SentenceType::Teacher,
        SentenceType::Student,
        SentenceType::Shared,
        SentenceType::Boosted,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SentenceType::Teacher => "teacher",
            SentenceType::Student => "student",
            SentenceType::Shared => "shared",
            SentenceType::Boosted => "boosted",
        }
    }
}

pub fn teacher_gap(mean_lp_teacher: f64, mean_lp_student: f64) -> f64 {
    mean_lp_teacher - mean_lp_student
}

/// Labels one sentence. Rules apply in order: Teacher, Student, Boosted, Shared.
pub fn classify_sentence(triple: &SentenceTriple, tau: f64) -> Result<SentenceType, DivergenceError> {
    if !(tau > 0.0) {
        return Err(DivergenceError::BadTau(tau));
    }
    let lp_d = triple
        .mean_lp_distilled
        .ok_or(DivergenceError::MissingDistilled(triple.sentence_index))?;
    let (lp_t, lp_s) = (triple.mean_lp_teacher, triple.mean_lp_student);
    let gap = teacher_gap(lp_t, lp_s);
    Ok(if gap >= tau {
        SentenceType::Teacher
    } else if gap <= -tau {
        SentenceType::Student
    } else if (lp_d - lp_t).abs().min((lp_d - lp_s).abs()) >= tau {
        SentenceType::Boosted
    } else {
        SentenceType::Shared
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionProfile {
    /// 1-based sentence position.
    pub position: usize,
    /// Type fractions among correct responses, indexed by [`SentenceType::index`].
    pub correct: Option<[f64; 4]>,
    pub incorrect: Option<[f64; 4]>,
    pub support_correct: usize,
    pub support_incorrect: usize,
}

/// Per-position type fractions split by correctness, for positions `1..=max_position`.
pub fn positionwise_profile(
    labeled: &[(Vec<SentenceType>, bool)],
    max_position: usize,
) -> Vec<PositionProfile> {
    if labeled.is_empty() {
        return Vec::new();
    }
    (1..=max_position)
        .map(|position| {
            let mut counts = [[0usize; 4]; 2];
            for (labels, correct) in labeled {
                if let Some(t) = labels.get(position - 1) {
                    counts[usize::from(!correct)][t.index()] += 1;
                }
            }
            let fractions = |c: [usize; 4]| {
                let support: usize = c.iter().sum();
                let f = (support > 0).then(|| c.map(|k| k as f64 / support as f64));
                (f, support)
            };
            let (correct, support_correct) = fractions(counts[0]);
            let (incorrect, support_incorrect) = fractions(counts[1]);
            PositionProfile {
                position,
                correct,
                incorrect,
                support_correct,
                support_incorrect,
            }
        })
        .collect()
}

/// Discrete area between the correct and incorrect curves of one type.
pub fn delta_area(
    profiles: &[PositionProfile],
    ty: SentenceType,
    max_position: usize,
) -> Result<f64, DivergenceError> {
    let mut delta = 0.0;
    for position in 1..=max_position {
        let p = profiles
            .iter()
            .find(|p| p.position == position)
            .ok_or(DivergenceError::MissingPosition(position))?;
        let correct = p.correct.ok_or(DivergenceError::NoSupport {
            position,
            side: "correct",
        })?;
        let incorrect = p.incorrect.ok_or(DivergenceError::NoSupport {
            position,
            side: "incorrect",
        })?;
        delta += correct[ty.index()] - incorrect[ty.index()];
    }
    Ok(delta)
}

/// Profile CSV: `position,type,side,fraction,support`; unsupported sides are omitted.
pub fn profile_csv(profiles: &[PositionProfile]) -> String {
    let mut out = String::from("position,type,side,fraction,support\n");
    for p in profiles {
        for ty in SentenceType::ALL {
            for (side, fractions, support) in [
                ("correct", p.correct, p.support_correct),
                ("incorrect", p.incorrect, p.support_incorrect),
            ] {
                if let Some(f) = fractions {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        p.position,
                        ty.as_str(),
                        side,
                        f[ty.index()],
                        support
                    );
                }
            }
        }
    }
    out
}

/// Content of the last `\boxed{…}` in `text`, honoring nested braces.
pub fn last_boxed(text: &str) -> Option<&str> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether the last boxed answer equals `reference` up to whitespace.
pub fn boxed_answer_correct(text: &str, reference: &str) -> bool {
    last_boxed(text).is_some_and(|b| normalize_ws(b) == normalize_ws(reference))
}
