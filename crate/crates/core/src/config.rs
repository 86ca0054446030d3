//! Pipeline configuration (TOML).
//!
//! Every section has defaults, so an empty file is a valid configuration for
//! the mock backend. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{DEFAULT_MAX_POSITION, DEFAULT_TAU};
use crate::filters::FilterConfig;
use crate::gateway::http::{HttpConfig, DEFAULT_TIMEOUT_MS, INITIAL_BACKOFF_MS, MAX_ATTEMPTS};
use crate::gateway::DEFAULT_MAX_IN_FLIGHT;
use crate::likelihood::DEFAULT_BINS;
use crate::mixed_policy::MixedPolicyConfig;
use crate::scheduler::SchedulerConfig;
use crate::segmenter::SegmenterConfig;

/// Environment variable that overrides `gateway.api_key`.
pub const API_KEY_ENV: &str = "SEQDISTILL_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub questions: PathBuf,
    /// Directory holding every intermediate and output file.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            questions: PathBuf::from("questions.jsonl"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Models {
    pub teacher: String,
    pub student: String,
    /// Needed only by `classify` and the profile analytics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distilled: Option<String>,
}

impl Default for Models {
    fn default() -> Self {
        Self {
            teacher: "teacher".into(),
            student: "student".into(),
            distilled: Some("distilled".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            api_key: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_attempts: MAX_ATTEMPTS,
            initial_backoff_ms: INITIAL_BACKOFF_MS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl GatewaySettings {
    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            api_key: self.api_key.clone(),
            timeout_ms: self.timeout_ms,
            max_attempts: self.max_attempts,
            initial_backoff_ms: self.initial_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    /// Candidates per question and temperature.
    pub candidates: usize,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            candidates: 4,
            top_p: 1.0,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Divergence {
    pub tau: f64,
    pub max_position: usize,
}

impl Default for Divergence {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_position: DEFAULT_MAX_POSITION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Das {
    /// Selected responses per pool; absent means every question's quota.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub quota: usize,
}

impl Default for Das {
    fn default() -> Self {
        Self {
            budget: None,
            quota: crate::das::DEFAULT_QUOTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyze {
    pub bins: usize,
}

impl Default for Analyze {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Oracle {
    /// Line-record model files; the built-in two-sequence pair when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_lm: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_lm: Option<PathBuf>,
    pub samples: usize,
    pub coverage_temperatures: Vec<f64>,
    pub coverage_draws: usize,
    pub coverage_trials: usize,
}

impl Default for Oracle {
    fn default() -> Self {
        Self {
            teacher_lm: None,
            student_lm: None,
            samples: 100_000,
            coverage_temperatures: vec![0.6, 1.0],
            coverage_draws: 20,
            coverage_trials: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub models: Models,
    pub gateway: GatewaySettings,
    pub sampling: Sampling,
    pub segmenter: SegmenterConfig,
    pub divergence: Divergence,
    pub das: Das,
    pub filters: FilterConfig,
    pub scheduler: SchedulerConfig,
    pub mixed: MixedPolicyConfig,
    pub analyze: Analyze,
    pub oracle: Oracle,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })
    }

    /// Loads `path`; relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.questions);
        fix(&mut self.paths.work_dir);
        if let Some(p) = self.oracle.teacher_lm.as_mut() {
            fix(p);
        }
        if let Some(p) = self.oracle.student_lm.as_mut() {
            fix(p);
        }
    }

    /// Applies the API-key environment override.
    pub fn apply_env(&mut self) {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.gateway.api_key = Some(key);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.sampling.candidates == 0 {
            return bad("sampling.candidates must be >= 1");
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return bad("sampling.top_p must be in (0, 1]");
        }
        if self.sampling.max_tokens == 0 {
            return bad("sampling.max_tokens must be >= 1");
        }
        if !(self.divergence.tau > 0.0) {
            return bad("divergence.tau must be positive");
        }
        if self.divergence.max_position == 0 {
            return bad("divergence.max_position must be >= 1");
        }
        if self.das.quota == 0 || self.das.budget == Some(0) {
            return bad("das.quota and das.budget must be >= 1");
        }
        if !(self.scheduler.low_t >= 0.0 && self.scheduler.low_t < self.scheduler.high_t) {
            return bad("scheduler.low_t must be non-negative and below scheduler.high_t");
        }
        if !(self.mixed.cap_factor > 1.0) {
            return bad("mixed.cap_factor must exceed 1");
        }
        if self.mixed.bin_edges.len() < 2 || self.mixed.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("mixed.bin_edges must be strictly ascending with at least two entries");
        }
        if self.analyze.bins == 0 {
            return bad("analyze.bins must be >= 1");
        }
        if self.filters.length.max_tokens == 0 {
            return bad("filters.length.max_tokens must be >= 1");
        }
        self.filters.repetition.validate().map_err(ConfigError::Invalid)?;
        if self.segmenter.min_chars == 0 {
            return bad("segmenter.min_chars must be >= 1");
        }
        if self.oracle.samples == 0 || self.oracle.coverage_draws == 0 || self.oracle.coverage_trials == 0 {
            return bad("oracle sample counts must be >= 1");
        }
        if self.oracle.coverage_temperatures.iter().any(|t| !(*t > 0.0)) {
            return bad("oracle.coverage_temperatures must be positive");
        }
        if self.gateway.max_in_flight == 0 {
            return bad("gateway.max_in_flight must be >= 1");
        }
        Ok(())
    }

    /// TOML snapshot of the resolved configuration (the API key is never written).
    pub fn snapshot(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
