//! Temperature-scheduled stage datasets and their manifests.
//!
//! Stage 1 trains the base student on low-temperature teacher samples;
//! stage 2 continues from stage 1 on high-temperature samples.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, FieldError, QuestionRecord, Record, ResponseRecord, TrainingExample};
use crate::filters::MarkerTable;

pub const DEFAULT_LOW_T: f64 = 0.6;
pub const DEFAULT_HIGH_T: f64 = 1.0;
const TEMPERATURE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("record `{id}` has temperature {found}, but its pool is declared at {expected}")]
    TemperatureMismatch { id: String, found: f64, expected: f64 },
    #[error("stage {stage}: records `{first}` and `{second}` share question `{question_id}` and text")]
    Duplicate {
        stage: u8,
        question_id: String,
        first: String,
        second: String,
    },
    #[error("stage 1 temperature {low} must be below stage 2 temperature {high}")]
    TemperatureOrder { low: f64, high: f64 },
    #[error("record `{0}` refers to an unknown question")]
    UnknownQuestion(String),
    #[error("response `{0}` is not normalized: it must start with a think block")]
    NotNormalized(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Hyperparameters carried for an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingMeta {
    pub learning_rate_start: f64,
    pub learning_rate_end: f64,
    pub schedule: String,
    pub cutoff_tokens: usize,
    pub global_batch: usize,
    pub epochs: usize,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            learning_rate_start: 5e-5,
            learning_rate_end: 1e-5,
            schedule: "cosine".into(),
            cutoff_tokens: 65_536,
            global_batch: 64,
            epochs: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    BaseStudent,
    PreviousStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage_id: u8,
    pub temperature: f64,
    pub source_pool: String,
    pub dataset: String,
    pub selected_count: usize,
    pub init_from: InitFrom,
    pub training_meta: TrainingMeta,
}

impl Record for StageManifest {
    const KIND: &'static str = "stage_manifest";

    fn record_id(&self) -> Option<&str> {
        None
    }

    fn validate(&self) -> Result<(), FieldError> {
        let expected = if self.stage_id == 1 {
            InitFrom::BaseStudent
        } else {
            InitFrom::PreviousStage
        };
        if !(1..=2).contains(&self.stage_id) {
            return Err(FieldError::new("stage_id", "must be 1 or 2"));
        }
        if self.init_from != expected {
            return Err(FieldError::new(
                "init_from",
                format!("stage {} must start from {:?}", self.stage_id, expected),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub low_t: f64,
    pub high_t: f64,
    pub training_meta: TrainingMeta,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            low_t: DEFAULT_LOW_T,
            high_t: DEFAULT_HIGH_T,
            training_meta: TrainingMeta::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub examples: Vec<TrainingExample>,
    pub manifest: StageManifest,
}

/// `{prompt, target}` for one normalized response; the target is copied verbatim.
pub fn render_training_example(
    id: &str,
    question: &QuestionRecord,
    response: &str,
    markers: &MarkerTable,
) -> Result<TrainingExample, SchedulerError> {
    let think = response.starts_with(&markers.think_open)
        && response[markers.think_open.len()..].contains(&markers.think_close);
    if !think {
        return Err(SchedulerError::NotNormalized(id.to_owned()));
    }
    Ok(TrainingExample {
        id: id.to_owned(),
        question_id: question.id.clone(),
        prompt: question.prompt.clone(),
        target: response.to_owned(),
        loss_mask: Vec::new(),
    })
}

pub struct PoolInput<'a> {
    pub records: &'a [ResponseRecord],
    pub temperature: f64,
    pub source: &'a str,
}

fn build_stage(
    stage_id: u8,
    pool: &PoolInput<'_>,
    questions: &BTreeMap<String, QuestionRecord>,
    meta: &TrainingMeta,
    markers: &MarkerTable,
) -> Result<Stage, SchedulerError> {
    let mut records: Vec<&ResponseRecord> = pool.records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen: HashMap<(&str, &str), &str> = HashMap::new();
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        if (r.temperature - pool.temperature).abs() > TEMPERATURE_TOLERANCE {
            return Err(SchedulerError::TemperatureMismatch {
                id: r.id.clone(),
                found: r.temperature,
                expected: pool.temperature,
            });
        }
        if let Some(first) = seen.insert((&r.question_id, &r.text), &r.id) {
            return Err(SchedulerError::Duplicate {
                stage: stage_id,
                question_id: r.question_id.clone(),
                first: first.to_owned(),
                second: r.id.clone(),
            });
        }
        let q = questions
            .get(&r.question_id)
            .ok_or_else(|| SchedulerError::UnknownQuestion(r.id.clone()))?;
        examples.push(render_training_example(&r.id, q, &r.text, markers)?);
    }
    let dataset = format!("stage{stage_id}_dataset.jsonl");
    Ok(Stage {
        manifest: StageManifest {
            stage_id,
            temperature: pool.temperature,
            source_pool: pool.source.to_owned(),
            dataset,
            selected_count: examples.len(),
            init_from: if stage_id == 1 {
                InitFrom::BaseStudent
            } else {
                InitFrom::PreviousStage
            },
            training_meta: meta.clone(),
        },
        examples,
    })
}

/// Builds stage 1 from the low-temperature pool and stage 2 from the high one.
pub fn build_stages(
    low: &PoolInput<'_>,
    high: &PoolInput<'_>,
    questions: &BTreeMap<String, QuestionRecord>,
    meta: &TrainingMeta,
    markers: &MarkerTable,
) -> Result<Vec<Stage>, SchedulerError> {
    if !(low.temperature < high.temperature) {
        return Err(SchedulerError::TemperatureOrder {
            low: low.temperature,
            high: high.temperature,
        });
    }
    Ok(vec![
        build_stage(1, low, questions, meta, markers)?,
        build_stage(2, high, questions, meta, markers)?,
    ])
}

/// One stage from a single pool, for single-temperature baselines.
pub fn build_single_stage(
    pool: &PoolInput<'_>,
    questions: &BTreeMap<String, QuestionRecord>,
    meta: &TrainingMeta,
    markers: &MarkerTable,
) -> Result<Stage, SchedulerError> {
    build_stage(1, pool, questions, meta, markers)
}

/// Writes `stage<N>_dataset.jsonl` and `stage<N>_manifest.jsonl` under `dir`.
pub fn write_stages(stages: &[Stage], dir: &Path) -> Result<Vec<PathBuf>, SchedulerError> {
    let mut written = Vec::new();
    for stage in stages {
        let id = stage.manifest.stage_id;
        let dataset = dir.join(&stage.manifest.dataset);
        corpus::write_records(&stage.examples, &dataset)?;
        let manifest = dir.join(format!("stage{id}_manifest.jsonl"));
        corpus::write_records(std::slice::from_ref(&stage.manifest), &manifest)?;
        written.push(dataset);
        written.push(manifest);
    }
    Ok(written)
}
