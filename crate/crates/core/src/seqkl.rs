//! Exact sequence-level divergences over small autoregressive models.
//!
//! A [`ToyLm`] assigns a next-symbol distribution to every context, so the
//! distribution over complete sequences can be enumerated and KL, cross
//! entropy and entropy computed exactly. Monte-Carlo estimators sit beside
//! the exact values for comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, FieldError, Record};
use crate::util::mix64;

pub const EOT: &str = "EOT";
pub const ENUMERATION_GUARD: f64 = 1e6;
const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SeqKlError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("no conditional for context [{0}]")]
    MissingContext(String),
    #[error("{vocab}^{max_len} sequences exceed the enumeration guard of 1e6")]
    TooLarge { vocab: usize, max_len: usize },
    #[error("sequence [{0}] has positive mass under p but zero under q")]
    Support(String),
    #[error("models use different vocabularies")]
    VocabMismatch,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Finite-vocabulary autoregressive model.
///
/// Contexts are symbol-index sequences without end-of-text. Contexts of
/// length `max_len - 1` always end the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    symbols: Vec<String>,
    eot: usize,
    max_len: usize,
    conditionals: BTreeMap<Vec<usize>, Vec<f64>>,
    default: Option<Vec<f64>>,
}

impl ToyLm {
    pub fn new(
        symbols: Vec<String>,
        max_len: usize,
        conditionals: BTreeMap<Vec<usize>, Vec<f64>>,
        default: Option<Vec<f64>>,
    ) -> Result<Self, SeqKlError> {
        let eot = symbols
            .iter()
            .position(|s| s == EOT)
            .ok_or_else(|| SeqKlError::Invalid(format!("vocabulary lacks `{EOT}`")))?;
        let distinct: BTreeSet<&String> = symbols.iter().collect();
        if distinct.len() != symbols.len() {
            return Err(SeqKlError::Invalid("duplicate symbols".into()));
        }
        if max_len == 0 {
            return Err(SeqKlError::Invalid("max_len must be >= 1".into()));
        }
        let lm = Self {
            symbols,
            eot,
            max_len,
            conditionals,
            default,
        };
        lm.check()?;
        Ok(lm)
    }

    fn check(&self) -> Result<(), SeqKlError> {
        let v = self.symbols.len();
        let check_vec = |what: String, p: &[f64]| -> Result<(), SeqKlError> {
            if p.len() != v {
                return Err(SeqKlError::Invalid(format!("{what}: expected {v} probabilities")));
            }
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(SeqKlError::Invalid(format!("{what}: negative or non-finite entry")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(SeqKlError::Invalid(format!("{what}: sums to {s}")));
            }
            Ok(())
        };
        for (ctx, p) in &self.conditionals {
            let name = format!("context [{}]", self.render(ctx));
            if ctx.len() >= self.max_len || ctx.iter().any(|&s| s >= v || s == self.eot) {
                return Err(SeqKlError::Invalid(format!("{name} is not a valid context")));
            }
            check_vec(name.clone(), p)?;
            if ctx.len() == self.max_len - 1 && p[self.eot] != 1.0 {
                return Err(SeqKlError::Invalid(format!(
                    "{name} has length max_len - 1 and must end the sequence"
                )));
            }
        }
        if let Some(d) = &self.default {
            check_vec("default".into(), d)?;
        }
        Ok(())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn eot(&self) -> usize {
        self.eot
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn render(&self, seq: &[usize]) -> String {
        seq.iter()
            .map(|&s| self.symbols[s].as_str())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_sequence(&self, text: &str) -> Option<Vec<usize>> {
        text.split(',')
            .map(|s| self.symbols.iter().position(|x| x == s.trim()))
            .collect()
    }

    /// Next-symbol distribution after `context`.
    pub fn conditional(&self, context: &[usize]) -> Result<Vec<f64>, SeqKlError> {
        if context.len() + 1 >= self.max_len {
            let mut forced = vec![0.0; self.symbols.len()];
            forced[self.eot] = 1.0;
            return Ok(forced);
        }
        self.conditionals
            .get(context)
            .or(self.default.as_ref())
            .cloned()
            .ok_or_else(|| SeqKlError::MissingContext(self.render(context)))
    }

    /// Log-probability of a complete sequence (ending in end-of-text).
    pub fn log_prob(&self, seq: &[usize]) -> Result<f64, SeqKlError> {
        if seq.last() != Some(&self.eot) || seq[..seq.len() - 1].contains(&self.eot) {
            return Err(SeqKlError::Invalid(format!(
                "[{}] is not a complete sequence",
                self.render(seq)
            )));
        }
        let mut lp = 0.0;
        for i in 0..seq.len() {
            let p = self.conditional(&seq[..i])?[seq[i]];
            lp += p.ln();
        }
        Ok(lp)
    }

    pub fn sample_sequence<R: Rng>(&self, rng: &mut R) -> Result<Vec<usize>, SeqKlError> {
        let mut seq = Vec::with_capacity(self.max_len);
        loop {
            let p = self.conditional(&seq)?;
            let next = draw(&p, rng.gen::<f64>());
            seq.push(next);
            if next == self.eot {
                return Ok(seq);
            }
        }
    }

    /// Power-scales every conditional by `1 / temperature` and renormalizes.
    pub fn apply_temperature(&self, temperature: f64) -> Result<ToyLm, SeqKlError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(SeqKlError::BadTemperature(temperature));
        }
        let mut out = self.clone();
        for p in out.conditionals.values_mut() {
            *p = temper(p, temperature);
        }
        if let Some(d) = out.default.as_mut() {
            *d = temper(d, temperature);
        }
        Ok(out)
    }

    /// Model with a random conditional for every context.
    pub fn random<R: Rng>(rng: &mut R, vocab_size: usize, max_len: usize) -> Result<ToyLm, SeqKlError> {
        if vocab_size < 2 {
            return Err(SeqKlError::Invalid("vocabulary needs end-of-text and one symbol".into()));
        }
        let mut symbols = vec![EOT.to_owned()];
        symbols.extend((1..vocab_size).map(|i| format!("s{i}")));
        let mut conditionals = BTreeMap::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(ctx) = frontier.pop() {
            if ctx.len() + 1 >= max_len {
                continue;
            }
            let raw: Vec<f64> = (0..vocab_size).map(|_| rng.gen::<f64>() + 0.05).collect();
            let total: f64 = raw.iter().sum();
            let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let drift: f64 = 1.0 - p.iter().sum::<f64>();
            p[0] += drift;
            for s in 1..vocab_size {
                let mut next = ctx.clone();
                next.push(s);
                frontier.push(next);
            }
            conditionals.insert(ctx, p);
        }
        ToyLm::new(symbols, max_len, conditionals, None)
    }

    pub fn read(path: &Path) -> Result<ToyLm, SeqKlError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        ToyLm::from_lines(&text)
    }

    /// Parses the line-record form: one header, then one line per conditional.
    pub fn from_lines(text: &str) -> Result<ToyLm, SeqKlError> {
        let lines: Vec<ToyLmLine> = corpus::parse_records(text)?;
        let mut iter = lines.into_iter();
        let Some(ToyLmLine::Header { symbols, max_len }) = iter.next() else {
            return Err(SeqKlError::Invalid("first line must be the header".into()));
        };
        let index = |s: &str| -> Result<usize, SeqKlError> {
            symbols
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| SeqKlError::Invalid(format!("unknown symbol `{s}`")))
        };
        let mut conditionals = BTreeMap::new();
        let mut default = None;
        for line in iter {
            match line {
                ToyLmLine::Header { .. } => {
                    return Err(SeqKlError::Invalid("more than one header".into()))
                }
                ToyLmLine::Conditional { context, probs } => {
                    let ctx = context.iter().map(|s| index(s)).collect::<Result<Vec<_>, _>>()?;
                    if conditionals.insert(ctx, probs).is_some() {
                        return Err(SeqKlError::Invalid(format!(
                            "context [{}] listed twice",
                            context.join(",")
                        )));
                    }
                }
                ToyLmLine::Default { probs } => default = Some(probs),
            }
        }
        ToyLm::new(symbols, max_len, conditionals, default)
    }

    pub fn to_lines(&self) -> Result<String, SeqKlError> {
        let mut lines = vec![ToyLmLine::Header {
            symbols: self.symbols.clone(),
            max_len: self.max_len,
        }];
        for (ctx, p) in &self.conditionals {
            lines.push(ToyLmLine::Conditional {
                context: ctx.iter().map(|&s| self.symbols[s].clone()).collect(),
                probs: p.clone(),
            });
        }
        if let Some(d) = &self.default {
            lines.push(ToyLmLine::Default { probs: d.clone() });
        }
        Ok(corpus::render_records(&lines)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyLmLine {
    Header { symbols: Vec<String>, max_len: usize },
    Conditional { context: Vec<String>, probs: Vec<f64> },
    Default { probs: Vec<f64> },
}

impl Record for ToyLmLine {
    const KIND: &'static str = "toy_lm";

    fn record_id(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), FieldError> {
        Ok(())
    }
}

fn temper(p: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return p.to_vec();
    }
    let logs: Vec<f64> = p.iter().map(|x| x.ln() / temperature).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn draw(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Probability of every complete sequence with positive mass.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqDistribution {
    pub symbols: Vec<String>,
    pub probs: BTreeMap<Vec<usize>, f64>,
}

impl SeqDistribution {
    pub fn prob(&self, seq: &[usize]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn point_mass(symbols: Vec<String>, seq: Vec<usize>) -> Self {
        Self {
            symbols,
            probs: BTreeMap::from([(seq, 1.0)]),
        }
    }

    fn render(&self, seq: &[usize]) -> String {
        seq.iter()
            .map(|&s| self.symbols[s].as_str())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// `(rendered sequence, probability)` pairs in key order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        self.probs.iter().map(|(k, &p)| (self.render(k), p)).collect()
    }
}

/// Exact distribution over complete sequences.
pub fn enumerate_distribution(lm: &ToyLm) -> Result<SeqDistribution, SeqKlError> {
    let v = lm.symbols.len();
    if (v as f64).powi(lm.max_len as i32) > ENUMERATION_GUARD {
        return Err(SeqKlError::TooLarge {
            vocab: v,
            max_len: lm.max_len,
        });
    }
    let mut probs = BTreeMap::new();
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((ctx, mass)) = stack.pop() {
        let p = lm.conditional(&ctx)?;
        for (s, &ps) in p.iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            let mut next = ctx.clone();
            next.push(s);
            if s == lm.eot {
                probs.insert(next, mass * ps);
            } else if next.len() < lm.max_len {
                stack.push((next, mass * ps));
            } else {
                return Err(SeqKlError::Invalid(format!(
                    "context [{}] does not terminate",
                    lm.render(&ctx)
                )));
            }
        }
    }
    let dist = SeqDistribution {
        symbols: lm.symbols.clone(),
        probs,
    };
    let mass = dist.total_mass();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(SeqKlError::Invalid(format!("total mass {mass}")));
    }
    Ok(dist)
}

fn same_vocab(p: &SeqDistribution, q: &SeqDistribution) -> Result<(), SeqKlError> {
    if p.symbols != q.symbols {
        return Err(SeqKlError::VocabMismatch);
    }
    Ok(())
}

/// KL(p || q) in nats.
pub fn seq_kl(p: &SeqDistribution, q: &SeqDistribution) -> Result<f64, SeqKlError> {
    same_vocab(p, q)?;
    let mut kl = 0.0;
    for (y, &py) in &p.probs {
        if py == 0.0 {
            continue;
        }
        let qy = q.prob(y);
        if qy == 0.0 {
            return Err(SeqKlError::Support(p.render(y)));
        }
        kl += py * (py.ln() - qy.ln());
    }
    Ok(kl)
}

/// Cross entropy −Σ p log q in nats.
pub fn seq_ce(p: &SeqDistribution, q: &SeqDistribution) -> Result<f64, SeqKlError> {
    same_vocab(p, q)?;
    let mut ce = 0.0;
    for (y, &py) in &p.probs {
        if py == 0.0 {
            continue;
        }
        let qy = q.prob(y);
        if qy == 0.0 {
            return Err(SeqKlError::Support(p.render(y)));
        }
        ce -= py * qy.ln();
    }
    Ok(ce)
}

pub fn entropy(p: &SeqDistribution) -> f64 {
    -p.probs
        .values()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Mean of −log p_S(ŷ) over `n` sequences sampled from the teacher.
pub fn mc_sft_loss(lm_t: &ToyLm, lm_s: &ToyLm, n: usize, seed: u64) -> Result<f64, SeqKlError> {
    if n == 0 {
        return Err(SeqKlError::NoSamples);
    }
    if lm_t.symbols != lm_s.symbols {
        return Err(SeqKlError::VocabMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let y = lm_t.sample_sequence(&mut rng)?;
        let lp = lm_s.log_prob(&y)?;
        if lp == f64::NEG_INFINITY {
            return Err(SeqKlError::Support(lm_t.render(&y)));
        }
        total -= lp;
    }
    Ok(total / n as f64)
}

/// Mean base-model mass of the distinct sequences among `n` tempered draws.
pub fn support_coverage(
    lm: &ToyLm,
    temperature: f64,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, SeqKlError> {
    if n == 0 || trials == 0 {
        return Err(SeqKlError::NoSamples);
    }
    let base = enumerate_distribution(lm)?;
    let tempered = lm.apply_temperature(temperature)?;
    let per_trial: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(t as u64)));
            let mut seen = BTreeSet::new();
            for _ in 0..n {
                seen.insert(tempered.sample_sequence(&mut rng)?);
            }
            Ok(seen.iter().map(|y| base.prob(y)).sum())
        })
        .collect::<Result<_, SeqKlError>>()?;
    Ok(per_trial.iter().sum::<f64>() / trials as f64)
}

fn symbols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| (*s).to_owned()).collect()
}

/// `EOT` with probability `p_eot`, otherwise `a` then `EOT`.
pub fn two_sequence(p_eot: f64) -> Result<ToyLm, SeqKlError> {
    let root = vec![p_eot, 1.0 - p_eot];
    ToyLm::new(
        symbols(&[EOT, "a"]),
        2,
        BTreeMap::from([(Vec::new(), root)]),
        None,
    )
}

/// Masses of the ten continuations of the dominant first symbol.
pub const COVERAGE_SPREAD: [f64; 10] = [0.4, 0.2, 0.12, 0.08, 0.06, 0.05, 0.04, 0.025, 0.015, 0.01];

/// One dominant first symbol (mass 0.9) whose continuation spreads over ten
/// graded sequences, plus ten rare single-symbol sequences of mass 0.01.
pub fn coverage_toy() -> Result<ToyLm, SeqKlError> {
    let mut names = vec![EOT.to_owned(), "m".to_owned()];
    names.extend((0..10).map(|i| format!("r{i}")));
    let v = names.len();
    let mut conditionals = BTreeMap::new();
    let mut root = vec![0.0; v];
    root[1] = 0.9;
    for slot in root.iter_mut().skip(2) {
        *slot = 0.01;
    }
    conditionals.insert(Vec::new(), root);
    let mut after_m = vec![0.0; v];
    after_m[2..].copy_from_slice(&COVERAGE_SPREAD);
    conditionals.insert(vec![1], after_m);
    for r in 2..v {
        let mut end = vec![0.0; v];
        end[0] = 1.0;
        conditionals.insert(vec![r], end);
    }
    ToyLm::new(names, 3, conditionals, None)
}
