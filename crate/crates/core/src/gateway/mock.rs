//! Deterministic character-level mock models.
//!
//! Each model is a character trigram: the distribution of the next
//! character (or end-of-text) depends on the previous two characters of
//! `prompt + completion`. The conditional table is explicit and queryable,
//! so tests can compare sampled frequencies and reported logprobs against
//! known values.
//!
//! Besides plain trigram text, a model can wrap its free text in a response
//! format: `<think>…</think>\boxed{d}` or the channel-delimited layout used
//! by the default teacher. Format markup is forced (logprob 0), the free
//! body comes from the trigram table, and the boxed answer digit comes from
//! a per-question answer table. Reported logprobs are always those of the
//! untempered model, so scoring a sampled text reproduces its sample-time
//! logprobs exactly.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Backend, Completion, GatewayError, GenerationRequest, ScoringRequest};
use crate::corpus::{FinishReason, TokenSpan};
use crate::util::{mix64, stable_hash, unit_from};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const BOXED_OPEN: &str = "\\boxed{";
pub const BOXED_CLOSE: &str = "}";
pub const ANALYSIS_HEADER: &str = "<|channel|>analysis<|message|>";
pub const FINAL_SEPARATOR: &str = "<|end|><|start|>assistant<|channel|>final<|message|>";
pub const RETURN_MARKER: &str = "<|return|>";
pub const TOOL_HEADER: &str = "<|channel|>commentary to=functions.search<|message|>";
pub const CALL_MARKER: &str = "<|call|>";

/// Logprob assigned to characters the model cannot produce.
pub const UNKNOWN_LOGPROB: f64 = -13.815_510_557_964_274; // ln 1e-6

const MARKERS: [&str; 9] = [
    FINAL_SEPARATOR,
    TOOL_HEADER,
    ANALYSIS_HEADER,
    RETURN_MARKER,
    CALL_MARKER,
    THINK_CLOSE,
    THINK_OPEN,
    BOXED_OPEN,
    BOXED_CLOSE,
];

const MARKUP_CHARS: &str = "<>|\\{}";

pub const DEFAULT_VOCAB: &str = "etaoinshrdlucmfwypgbvk .,\n";

#[derive(Debug, Clone, PartialEq)]
pub struct TableParams {
    /// Exponent applied to the raw uniform weights; larger is peakier.
    pub sharpness: f64,
    /// End-of-text probability in every row.
    pub eot_prob: f64,
    /// Multiplier on the space character's weight.
    pub space_boost: f64,
}

impl Default for TableParams {
    fn default() -> Self {
        Self {
            sharpness: 2.0,
            eot_prob: 0.01,
            space_boost: 4.0,
        }
    }
}

/// Explicit trigram conditional table over `vocab ∪ {EOT}`.
///
/// Rows are indexed by the slots of the two previous characters: slot 0 is
/// "no character" (start of text), slots `1..=V` are vocabulary characters,
/// slot `V + 1` is any character outside the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigramTable {
    vocab: Vec<char>,
    rows: Vec<Vec<f64>>,
}

impl TrigramTable {
    pub fn generate(vocab: &str, seed: u64, params: &TableParams) -> Self {
        let vocab: Vec<char> = vocab.chars().collect();
        let slots = vocab.len() + 2;
        let mut rows = Vec::with_capacity(slots * slots);
        for row in 0..slots * slots {
            let prev1 = match row % slots {
                0 => None,
                s if s <= vocab.len() => Some(vocab[s - 1]),
                _ => None,
            };
            let mut weights: Vec<f64> = vocab
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let key = seed ^ mix64(((row as u64) << 20) | k as u64);
                    let mut w = unit_from(key).powf(params.sharpness);
                    if c == ' ' {
                        w *= params.space_boost;
                    }
                    match prev1 {
                        Some('.') | Some(',') => w *= if c == ' ' { 40.0 } else { 0.02 },
                        Some(' ') | Some('\n') if matches!(c, ' ' | '.' | ',' | '\n') => {
                            w *= 0.01
                        }
                        _ => {}
                    }
                    w
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w = *w / total * (1.0 - params.eot_prob);
            }
            weights.push(params.eot_prob);
            rows.push(weights);
        }
        Self { vocab, rows }
    }

    /// Builds a table from a row function `(prev2, prev1) -> probabilities over vocab ∪ {EOT}`.
    pub fn from_fn<F>(vocab: &str, f: F) -> Result<Self, GatewayError>
    where
        F: Fn(Option<char>, Option<char>) -> Vec<f64>,
    {
        let vocab: Vec<char> = vocab.chars().collect();
        let slots = vocab.len() + 2;
        let slot_char = |s: usize| {
            if s == 0 || s > vocab.len() {
                None
            } else {
                Some(vocab[s - 1])
            }
        };
        let mut rows = Vec::with_capacity(slots * slots);
        for row in 0..slots * slots {
            let probs = f(slot_char(row / slots), slot_char(row % slots));
            if probs.len() != vocab.len() + 1 {
                return Err(GatewayError::InvalidRequest(format!(
                    "row {row} has {} entries, expected {}",
                    probs.len(),
                    vocab.len() + 1
                )));
            }
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-12 {
                return Err(GatewayError::InvalidRequest(format!(
                    "row {row} is not a probability vector"
                )));
            }
            rows.push(probs);
        }
        Ok(Self { vocab, rows })
    }

    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    /// Index of end-of-text in every row.
    pub fn eot_index(&self) -> usize {
        self.vocab.len()
    }

    fn slot(&self, c: Option<char>) -> usize {
        match c {
            None => 0,
            Some(c) => self
                .vocab
                .iter()
                .position(|&v| v == c)
                .map_or(self.vocab.len() + 1, |i| i + 1),
        }
    }

    pub fn conditional(&self, prev2: Option<char>, prev1: Option<char>) -> &[f64] {
        let slots = self.vocab.len() + 2;
        &self.rows[self.slot(prev2) * slots + self.slot(prev1)]
    }

    /// Log-probability of `next` (`None` for end-of-text) after `prev2 prev1`.
    pub fn logprob(&self, prev2: Option<char>, prev1: Option<char>, next: Option<char>) -> f64 {
        let row = self.conditional(prev2, prev1);
        let p = match next {
            None => row[self.eot_index()],
            Some(c) => match self.vocab.iter().position(|&v| v == c) {
                Some(i) => row[i],
                None => return UNKNOWN_LOGPROB,
            },
        };
        if p > 0.0 {
            p.ln()
        } else {
            UNKNOWN_LOGPROB
        }
    }

    /// Row-wise mixture `weight * self + (1 - weight) * other`.
    pub fn blend(&self, other: &TrigramTable, weight: f64) -> TrigramTable {
        assert_eq!(self.vocab, other.vocab, "blended tables must share a vocabulary");
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| weight * x + (1.0 - weight) * y)
                    .collect()
            })
            .collect();
        TrigramTable {
            vocab: self.vocab.clone(),
            rows,
        }
    }
}

/// Temperature and nucleus reshaping of a probability vector.
///
/// `temperature == 0` selects the first argmax.
pub fn reshape(probs: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    if temperature == 0.0 {
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        out[best] = 1.0;
        return out;
    }
    let max_log = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln() / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    for (o, &p) in out.iter_mut().zip(probs) {
        if p > 0.0 {
            *o = (p.ln() / temperature - max_log).exp();
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= total);
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].total_cmp(&out[a]).then(a.cmp(&b)));
        let mut kept = 0.0;
        let mut cut = order.len();
        for (rank, &i) in order.iter().enumerate() {
            kept += out[i];
            if kept >= top_p {
                cut = rank + 1;
                break;
            }
        }
        for &i in &order[cut..] {
            out[i] = 0.0;
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= total);
    }
    out
}

fn draw(dist: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Correct answer digit the mock associates with a prompt.
///
/// Derived from the prompt's first line, so continuation prompts that
/// append text after a newline keep the same answer.
pub fn truth_digit(prompt: &str) -> u8 {
    let first_line = prompt.split('\n').next().unwrap_or("");
    (stable_hash(&[b"truth", first_line.as_bytes()]) % 10) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockFormat {
    /// Free trigram text only.
    Plain,
    /// `<think>body</think>\boxed{d}`.
    Think,
    /// Channel-delimited analysis/final layout, optionally a tool call.
    Harmony,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockModel {
    pub table: TrigramTable,
    pub format: MockFormat,
    /// Probability of the correct boxed digit; the rest is spread evenly.
    pub accuracy: f64,
    /// Harmony only: probability that the response is a tool call.
    pub tool_call_rate: f64,
    /// Forces end-of-text once the free body reaches this many characters.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Free,
    Markup,
    AnswerDigit,
}

struct Budget {
    out: String,
    count: usize,
    max: usize,
}

impl Budget {
    fn push(&mut self, c: char) -> bool {
        if self.count >= self.max {
            return false;
        }
        self.out.push(c);
        self.count += 1;
        true
    }

    fn push_str(&mut self, s: &str) -> bool {
        s.chars().all(|c| self.push(c))
    }

    fn last_two(&self, prompt: &str) -> (Option<char>, Option<char>) {
        let mut it = self.out.chars().rev().chain(prompt.chars().rev());
        let p1 = it.next();
        let p2 = it.next();
        (p2, p1)
    }
}

fn opens_think(prompt: &str) -> bool {
    match prompt.rfind(THINK_OPEN) {
        Some(pos) => !prompt[pos..].contains(THINK_CLOSE),
        None => false,
    }
}

impl MockModel {
    pub fn plain(table: TrigramTable) -> Self {
        Self {
            table,
            format: MockFormat::Plain,
            accuracy: 1.0,
            tool_call_rate: 0.0,
            stop_after: None,
        }
    }

    pub fn formatted(table: TrigramTable, format: MockFormat, accuracy: f64) -> Self {
        if format != MockFormat::Plain {
            assert!(
                table.vocab().iter().all(|c| !MARKUP_CHARS.contains(*c)),
                "formatted mock vocabularies must not contain markup characters"
            );
        }
        Self {
            table,
            format,
            accuracy,
            tool_call_rate: 0.0,
            stop_after: None,
        }
    }

    /// Answer-digit probabilities for a prompt.
    pub fn answer_distribution(&self, prompt: &str) -> [f64; 10] {
        let truth = truth_digit(prompt) as usize;
        let mut dist = [(1.0 - self.accuracy) / 9.0; 10];
        dist[truth] = self.accuracy;
        dist
    }

    fn body(
        &self,
        prompt: &str,
        w: &mut Budget,
        temperature: f64,
        top_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        let eot = self.table.eot_index();
        let mask_initial_eot = self.format != MockFormat::Plain;
        let mut produced = 0usize;
        loop {
            if w.count >= w.max {
                return false;
            }
            let (p2, p1) = w.last_two(prompt);
            let mut probs = self.table.conditional(p2, p1).to_vec();
            if self.stop_after.is_some_and(|k| produced >= k) {
                probs.iter_mut().for_each(|p| *p = 0.0);
                probs[eot] = 1.0;
            } else if mask_initial_eot && produced == 0 {
                probs[eot] = 0.0;
            }
            let k = draw(&reshape(&probs, temperature, top_p), rng);
            if k == eot {
                return true;
            }
            w.push(self.table.vocab()[k]);
            produced += 1;
        }
    }

    fn boxed_answer(
        &self,
        prompt: &str,
        w: &mut Budget,
        temperature: f64,
        top_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if !w.push_str(BOXED_OPEN) {
            return false;
        }
        let dist = reshape(&self.answer_distribution(prompt), temperature, top_p);
        let digit = draw(&dist, rng);
        w.push(char::from(b'0' + digit as u8)) && w.push_str(BOXED_CLOSE)
    }

    /// Samples one candidate.
    pub fn generate_one(
        &self,
        prompt: &str,
        temperature: f64,
        top_p: f64,
        max_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Completion {
        let mut w = Budget {
            out: String::new(),
            count: 0,
            max: max_tokens,
        };
        let continuing = opens_think(prompt);
        let (t, p) = (temperature, top_p);
        match self.format {
            MockFormat::Plain => {
                self.body(prompt, &mut w, t, p, rng);
            }
            _ if continuing => {
                let _ = self.body(prompt, &mut w, t, p, rng)
                    && w.push_str(THINK_CLOSE)
                    && self.boxed_answer(prompt, &mut w, t, p, rng);
            }
            MockFormat::Think => {
                let _ = w.push_str(THINK_OPEN)
                    && self.body(prompt, &mut w, t, p, rng)
                    && w.push_str(THINK_CLOSE)
                    && self.boxed_answer(prompt, &mut w, t, p, rng);
            }
            MockFormat::Harmony => {
                let tool_call = rng.gen::<f64>() < self.tool_call_rate;
                let _ = if tool_call {
                    w.push_str(TOOL_HEADER)
                        && self.body(prompt, &mut w, t, p, rng)
                        && w.push_str(CALL_MARKER)
                } else {
                    w.push_str(ANALYSIS_HEADER)
                        && self.body(prompt, &mut w, t, p, rng)
                        && w.push_str(FINAL_SEPARATOR)
                        && self.boxed_answer(prompt, &mut w, t, p, rng)
                        && w.push_str(RETURN_MARKER)
                };
            }
        }
        let finish_reason = if w.count >= max_tokens {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        let tokens = self.char_tokens(prompt, &w.out);
        Completion {
            text: w.out,
            tokens,
            finish_reason,
        }
    }

    fn classify(&self, chars: &[char]) -> Vec<CharClass> {
        let mut classes = vec![CharClass::Free; chars.len()];
        if self.format == MockFormat::Plain {
            return classes;
        }
        let markers: Vec<Vec<char>> = MARKERS.iter().map(|m| m.chars().collect()).collect();
        let mut i = 0;
        while i < chars.len() {
            let hit = markers.iter().find(|m| chars[i..].starts_with(m));
            match hit {
                Some(m) => {
                    classes[i..i + m.len()].fill(CharClass::Markup);
                    i += m.len();
                    let opens_answer = m.iter().copied().eq(BOXED_OPEN.chars());
                    if opens_answer
                        && i < chars.len()
                        && !markers.iter().any(|m| chars[i..].starts_with(m))
                    {
                        classes[i] = CharClass::AnswerDigit;
                        i += 1;
                    }
                }
                None => i += 1,
            }
        }
        classes
    }

    /// Teacher-forced per-character logprobs of `completion` after `prompt`.
    pub fn score_chars(&self, prompt: &str, completion: &str) -> Vec<f64> {
        let chars: Vec<char> = completion.chars().collect();
        let classes = self.classify(&chars);
        let mut tail = prompt.chars().rev();
        let mut p1 = tail.next();
        let mut p2 = tail.next();
        let answers = self.answer_distribution(prompt);
        chars
            .iter()
            .zip(classes)
            .map(|(&c, class)| {
                let lp = match class {
                    CharClass::Markup => 0.0,
                    CharClass::AnswerDigit => match c.to_digit(10) {
                        Some(d) if answers[d as usize] > 0.0 => answers[d as usize].ln(),
                        _ => UNKNOWN_LOGPROB,
                    },
                    CharClass::Free => self.table.logprob(p2, p1, Some(c)),
                };
                p2 = p1;
                p1 = Some(c);
                lp
            })
            .collect()
    }

    fn char_tokens(&self, prompt: &str, completion: &str) -> Vec<TokenSpan> {
        self.score_chars(prompt, completion)
            .into_iter()
            .zip(completion.chars())
            .enumerate()
            .map(|(i, (logprob, c))| TokenSpan {
                text: c.to_string(),
                logprob,
                char_start: i,
                char_end: i + 1,
            })
            .collect()
    }
}

/// Registry of mock models keyed by model id.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    models: HashMap<String, MockModel>,
}

/// Model ids of the standard three-model mock suite.
#[derive(Debug, Clone)]
pub struct MockSuiteIds<'a> {
    pub teacher: &'a str,
    pub student: &'a str,
    pub distilled: &'a str,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, model_id: impl Into<String>, model: MockModel) {
        self.models.insert(model_id.into(), model);
    }

    pub fn model(&self, model_id: &str) -> Result<&MockModel, GatewayError> {
        self.models
            .get(model_id)
            .ok_or_else(|| GatewayError::UnknownModel(model_id.to_owned()))
    }

    /// Teacher in the channel-delimited layout; student and distilled models
    /// in `<think>` layout, each a mixture of the teacher table with an
    /// unrelated table (the distilled model sits closer to the teacher).
    pub fn standard(ids: MockSuiteIds<'_>) -> Self {
        let teacher_table = TrigramTable::generate(
            DEFAULT_VOCAB,
            0x7EAC_4E12,
            &TableParams {
                sharpness: 2.0,
                eot_prob: 1.0 / 220.0,
                space_boost: 4.0,
            },
        );
        let other = TrigramTable::generate(
            DEFAULT_VOCAB,
            0x5707_E417,
            &TableParams {
                sharpness: 2.5,
                eot_prob: 1.0 / 600.0,
                space_boost: 4.0,
            },
        );
        let mut teacher = MockModel::formatted(teacher_table.clone(), MockFormat::Harmony, 0.85);
        teacher.tool_call_rate = 0.03;
        let student =
            MockModel::formatted(teacher_table.blend(&other, 0.4), MockFormat::Think, 0.5);
        let distilled =
            MockModel::formatted(teacher_table.blend(&other, 0.75), MockFormat::Think, 0.7);
        let mut backend = Self::new();
        backend.register(ids.teacher, teacher);
        backend.register(ids.student, student);
        backend.register(ids.distilled, distilled);
        backend
    }
}

/// Seed of candidate `index` for a request; independent of `n`.
fn candidate_seed(req: &GenerationRequest, index: usize) -> u64 {
    stable_hash(&[
        b"sample",
        &req.seed.unwrap_or(0).to_le_bytes(),
        req.model_id.as_bytes(),
        req.prompt.as_bytes(),
        &req.temperature.to_bits().to_le_bytes(),
        &req.top_p.to_bits().to_le_bytes(),
        &(req.max_tokens as u64).to_le_bytes(),
        &(index as u64).to_le_bytes(),
    ])
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<Completion>, GatewayError> {
        req.validate()?;
        let model = self.model(&req.model_id)?;
        Ok((0..req.n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(req, i));
                model.generate_one(&req.prompt, req.temperature, req.top_p, req.max_tokens, &mut rng)
            })
            .collect())
    }

    fn score(&self, req: &ScoringRequest) -> Result<Vec<TokenSpan>, GatewayError> {
        let model = self.model(&req.model_id)?;
        Ok(model.char_tokens(&req.prompt, &req.completion))
    }

    fn count_tokens(&self, model_id: &str, text: &str) -> Result<usize, GatewayError> {
        self.model(model_id)?;
        Ok(text.chars().count())
    }
}
