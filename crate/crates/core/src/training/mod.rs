//! Multi-task, multi-stage training: task sampling, single-task batches,
//! task-string dropout, the optimizer and the stage loop.

mod optimizer;
mod sampler;
mod trainer;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use optimizer::{optimizer_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sampler::{apply_task_dropout, sample_task, BatchBuilder};
pub use trainer::{train_stage, StageReport, StepRecord};
pub(crate) use trainer::check_examples;

use crate::error::{Error, Result};

/// One (task string, query, positive, optional hard negative) example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// Task string prepended to the query; `None` once dropped.
    pub task: Option<String>,
    pub query: String,
    pub positive: String,
    pub hard_negative: Option<String>,
    pub modality_tag: String,
}

impl TrainingExample {
    pub fn new(task: &str, query: &str, positive: &str) -> Self {
        TrainingExample {
            task: (!task.is_empty()).then(|| task.to_string()),
            query: query.to_string(),
            positive: positive.to_string(),
            hard_negative: None,
            modality_tag: "text".to_string(),
        }
    }

    pub fn with_hard_negative(mut self, negative: &str) -> Self {
        self.hard_negative = Some(negative.to_string());
        self
    }

    pub fn with_modality(mut self, tag: &str) -> Self {
        self.modality_tag = tag.to_string();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pft,
    Ft,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pft => "pft",
            Stage::Ft => "ft",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub name: String,
    pub examples: Arc<Vec<TrainingExample>>,
    pub sampling_rate: f64,
    /// Per-task batch size, honored in the FT stage.
    pub batch_size: usize,
    pub stages: Vec<Stage>,
    pub task_string_dropout_p: f64,
    /// Example budget after which the task stops being sampled.
    pub max_examples: Option<usize>,
}

impl TaskSpec {
    pub fn new(name: &str, examples: Vec<TrainingExample>, batch_size: usize) -> Self {
        TaskSpec {
            name: name.to_string(),
            examples: Arc::new(examples),
            sampling_rate: 1.0,
            batch_size,
            stages: vec![Stage::Pft, Stage::Ft],
            task_string_dropout_p: 0.2,
            max_examples: None,
        }
    }

    pub fn active_in(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn batch_size_for(&self, stage: &StageConfig) -> usize {
        match stage.stage {
            Stage::Pft => stage.default_batch_size,
            Stage::Ft => self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("task with empty name".into()));
        }
        if !(self.sampling_rate >= 0.0 && self.sampling_rate.is_finite()) {
            return Err(Error::Config(format!(
                "task {}: sampling_rate must be non-negative",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.task_string_dropout_p) {
            return Err(Error::Config(format!(
                "task {}: task_string_dropout_p must be in [0, 1]",
                self.name
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("task {}: batch_size must be positive", self.name)));
        }
        if self.examples.is_empty() {
            return Err(Error::Config(format!("task {}: no examples", self.name)));
        }
        if let Some(i) = self
            .examples
            .iter()
            .position(|e| e.query.is_empty() || e.positive.is_empty())
        {
            return Err(Error::Config(format!(
                "task {}: example {i} has an empty query or positive",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global batch size used by every task during PFT.
    pub default_batch_size: usize,
    /// Optional global gradient-norm clip.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl StageConfig {
    pub fn pft(steps: usize, batch_size: usize, seed: u64) -> Self {
        StageConfig {
            stage: Stage::Pft,
            steps,
            learning_rate: 1e-3,
            seed,
            default_batch_size: batch_size,
            max_grad_norm: None,
        }
    }

    pub fn ft(steps: usize, batch_size: usize, seed: u64) -> Self {
        StageConfig {
            stage: Stage::Ft,
            steps,
            learning_rate: 3e-4,
            seed,
            default_batch_size: batch_size,
            max_grad_norm: None,
        }
    }

    pub fn validate(&self, tasks: &[TaskSpec]) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "{} learning_rate must be non-negative",
                self.stage
            )));
        }
        if self.default_batch_size == 0 {
            return Err(Error::Config(format!("{} batch size must be positive", self.stage)));
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        for t in tasks.iter().filter(|t| t.active_in(self.stage)) {
            let bs = t.batch_size_for(self);
            if bs > t.examples.len() {
                return Err(Error::Config(format!(
                    "task {}: batch size {bs} exceeds dataset size {} in {}",
                    t.name,
                    t.examples.len(),
                    self.stage
                )));
            }
        }
        Ok(())
    }
}
