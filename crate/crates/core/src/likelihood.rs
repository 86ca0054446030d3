//! Geometric-mean likelihoods and probability density histograms.
//!
//! All arithmetic stays in log space (nats); probabilities are only
//! materialized at the API edge.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::ResponseRecord;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LikelihoodError {
    #[error("no logprobs to average")]
    Empty,
    #[error("logprob {value} at position {index} is not <= 0")]
    PositiveLogprob { index: usize, value: f64 },
    #[error("response `{0}` has no token logprobs; score it first")]
    MissingTokens(String),
    #[error("value {0} is not a probability in [0, 1]")]
    OutOfRange(f64),
    #[error("histogram needs at least one bin")]
    NoBins,
}

/// Arithmetic mean of per-token logprobs; `exp` of it is the geometric-mean probability.
pub fn mean_logprob(token_logprobs: &[f64]) -> Result<f64, LikelihoodError> {
    if token_logprobs.is_empty() {
        return Err(LikelihoodError::Empty);
    }
    let mut sum = 0.0;
    for (index, &value) in token_logprobs.iter().enumerate() {
        if value.is_nan() || value > 0.0 {
            return Err(LikelihoodError::PositiveLogprob { index, value });
        }
        sum += value;
    }
    Ok(sum / token_logprobs.len() as f64)
}

/// Geometric-mean token probability of a scored response.
pub fn response_geomean(record: &ResponseRecord) -> Result<f64, LikelihoodError> {
    match record.tokens.as_deref() {
        Some(tokens) if !tokens.is_empty() => {
            let lps: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
            Ok(mean_logprob(&lps)?.exp())
        }
        _ => Err(LikelihoodError::MissingTokens(record.id.clone())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistogram {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
    pub counts: Vec<usize>,
    pub sample_count: usize,
}

impl DensityHistogram {
    /// CSV with header `bin_lo,bin_hi,density,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,density,count\n");
        for i in 0..self.densities.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.densities[i],
                self.counts[i]
            );
        }
        out
    }

    /// Σ density × width, which is 1 for any non-empty histogram.
    pub fn total_mass(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .sum()
    }
}

/// Uniform-bin density histogram over [0, 1]; 1.0 falls in the last bin.
pub fn density(values: &[f64], bins: usize) -> Result<DensityHistogram, LikelihoodError> {
    if bins == 0 {
        return Err(LikelihoodError::NoBins);
    }
    if values.is_empty() {
        return Err(LikelihoodError::Empty);
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(LikelihoodError::OutOfRange(v));
        }
        let bin = ((v * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let n = values.len() as f64;
    let densities = counts
        .iter()
        .zip(bin_edges.windows(2))
        .map(|(&c, w)| c as f64 / (n * (w[1] - w[0])))
        .collect();
    Ok(DensityHistogram {
        bin_edges,
        densities,
        counts,
        sample_count: values.len(),
    })
}

/// Inter-quartile range using linear interpolation between order statistics.
pub fn interquartile_range(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    Some(q(0.75) - q(0.25))
}
