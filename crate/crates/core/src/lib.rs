//! Data curation for sequence-level (long chain-of-thought) distillation.
//!
//! The crate covers the whole curation path from teacher sampling to
//! stage datasets:
//!
//! * [`corpus`]: line-delimited record schemas and deterministic file I/O.
//! * [`gateway`]: completions client (HTTP or built-in mock) with per-token
//!   logprobs and teacher-forced scoring.
//! * [`segmenter`] and [`likelihood`]: sentence spans and geometric-mean
//!   likelihood statistics.
//! * [`divergence`] and [`das`]: sentence source-type analysis and
//!   divergence-aware candidate selection.
//! * [`filters`]: structure, length and repetition gates.
//! * [`scheduler`]: two-stage temperature-scheduled datasets and manifests.
//! * [`mixed_policy`]: student regeneration, truncation and teacher
//!   continuation.
//! * [`seqkl`]: exact enumeration over toy autoregressive models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chars;
pub mod config;
pub mod corpus;
pub mod das;
pub mod divergence;
pub mod filters;
pub mod gateway;
pub mod likelihood;
pub mod mixed_policy;
pub mod pipeline;
pub mod scheduler;
pub mod segmenter;
pub mod seqkl;
pub(crate) mod util;

pub use corpus::{
    Domain, FinishReason, ModelRole, Provenance, QuestionRecord, Record, ResponseRecord,
    TokenSpan, TrainingExample,
};
