//! JSON run configuration: encoder, loss, tasks with their datasets, the two
//! stages and an optional evaluation binding. Relative paths resolve against
//! the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::files::read_dataset;
use super::tokenizer::MIN_VOCAB;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::MetricSpec;
use crate::training::{Stage, StageConfig, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub dataset: PathBuf,
    #[serde(default = "one")]
    pub sampling_rate: f64,
    pub batch_size: usize,
    #[serde(default = "both_stages")]
    pub stages: Vec<Stage>,
    #[serde(default = "default_dropout")]
    pub task_string_dropout_p: f64,
    #[serde(default)]
    pub max_examples: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn both_stages() -> Vec<Stage> {
    vec![Stage::Pft, Stage::Ft]
}

fn default_dropout() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub steps: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub metrics: Vec<MetricSpec>,
    /// Prefix size to evaluate at; defaults to the full output width.
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub tasks: Vec<TaskEntry>,
    pub pft: StageEntry,
    pub ft: StageEntry,
    #[serde(default)]
    pub eval: Option<EvalEntry>,
    /// Write an intermediate checkpoint every this many steps of each stage.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

/// Child seed for a named purpose, so that stages and initialization draw
/// from independent streams of the one run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl RunConfig {
    /// Reads, path-resolves and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.tasks {
            fix(&mut t.dataset);
        }
        if let Some(e) = &mut self.eval {
            fix(&mut e.corpus);
            fix(&mut e.queries);
            fix(&mut e.qrels);
        }
    }

    /// Schema checks that need no data; also confirms referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} is below the byte tokenizer's {MIN_VOCAB}",
                self.encoder.vocab_size
            )));
        }
        self.loss.validate(self.encoder.d_out)?;
        if self.loss.mrl_dims != self.encoder.mrl_dims {
            return Err(Error::Config("loss.mrl_dims must equal encoder.mrl_dims".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks".into()));
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("task {} listed twice", w[0])));
        }
        for t in &self.tasks {
            if t.stages.is_empty() {
                return Err(Error::Config(format!("task {} has no stages", t.name)));
            }
            must_exist(&t.dataset)?;
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if let Some(e) = &self.eval {
            for p in [&e.corpus, &e.queries, &e.qrels] {
                must_exist(p)?;
            }
            if e.metrics.is_empty() {
                return Err(Error::Config("eval.metrics is empty".into()));
            }
            if let Some(d) = e.dim {
                if !self.encoder.mrl_dims.contains(&d) {
                    return Err(Error::Config(format!("eval.dim {d} is not one of mrl_dims")));
                }
            }
        }
        for (stage, s) in [(Stage::Pft, &self.pft), (Stage::Ft, &self.ft)] {
            self.stage_config(stage, s).validate(&[])?;
        }
        Ok(())
    }

    fn stage_config(&self, stage: Stage, s: &StageEntry) -> StageConfig {
        let seed = derive_seed(self.seed, &stage.to_string());
        let mut out = match stage {
            Stage::Pft => StageConfig::pft(s.steps, s.batch_size, seed),
            Stage::Ft => StageConfig::ft(s.steps, s.batch_size, seed),
        };
        if let Some(lr) = s.learning_rate {
            out.learning_rate = lr;
        }
        out.max_grad_norm = s.max_grad_norm;
        out
    }

    pub fn pft_stage(&self) -> StageConfig {
        self.stage_config(Stage::Pft, &self.pft)
    }

    pub fn ft_stage(&self) -> StageConfig {
        self.stage_config(Stage::Ft, &self.ft)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    /// Reads every task's dataset. Examples without a task string in the file
    /// take the task's name as their task string.
    pub fn load_tasks(&self) -> Result<Vec<TaskSpec>> {
        self.tasks
            .iter()
            .map(|t| {
                let ds = read_dataset(&t.dataset)?;
                let spec = TaskSpec {
                    name: t.name.clone(),
                    examples: Arc::new(ds.examples),
                    sampling_rate: t.sampling_rate,
                    batch_size: t.batch_size,
                    stages: t.stages.clone(),
                    task_string_dropout_p: t.task_string_dropout_p,
                    max_examples: t.max_examples,
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

fn must_exist(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("referenced file {} does not exist", p.display())))
    }
}
