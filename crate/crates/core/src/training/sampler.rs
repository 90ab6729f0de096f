use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Stage, StageConfig, TaskSpec, TrainingExample};
use crate::error::{Error, Result};

/// Categorical draw over tasks active in `stage`, proportional to their rates.
pub fn sample_task<'a, R: Rng>(tasks: &'a [TaskSpec], stage: Stage, rng: &mut R) -> Result<&'a TaskSpec> {
    let rates: Vec<f64> = tasks
        .iter()
        .map(|t| if t.active_in(stage) { t.sampling_rate } else { 0.0 })
        .collect();
    let idx = draw(&rates, rng).ok_or_else(|| {
        Error::Config(format!("no task with positive sampling rate in {stage}"))
    })?;
    Ok(&tasks[idx])
}

pub(crate) fn draw<R: Rng>(rates: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = rates.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, &r) in rates.iter().enumerate() {
        if r <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < r {
            return Some(i);
        }
        u -= r;
    }
    last
}

/// With probability `p`, removes the task string from a copy of the example.
pub fn apply_task_dropout<R: Rng>(ex: &TrainingExample, p: f64, rng: &mut R) -> TrainingExample {
    let drop = rng.gen::<f64>() < p;
    let mut out = ex.clone();
    if drop {
        out.task = None;
    }
    out
}

#[derive(Debug)]
struct TaskStream {
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    consumed: usize,
}

/// Produces single-task batches by walking each task's dataset in a fresh
/// shuffled order per epoch. The shuffle for epoch `e` of task `t` is seeded
/// from `(seed, t, e)`, so batch sequences do not depend on how tasks interleave.
#[derive(Debug)]
pub struct BatchBuilder {
    seed: u64,
    streams: HashMap<String, TaskStream>,
}

fn epoch_seed(seed: u64, task: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task.as_bytes());
    h.update(epoch.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn shuffled(n: usize, seed: u64, task: &str, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, task, epoch)));
    order
}

impl BatchBuilder {
    pub fn new(seed: u64) -> Self {
        BatchBuilder {
            seed,
            streams: HashMap::new(),
        }
    }

    /// Number of examples handed out for `task` so far.
    pub fn consumed(&self, task: &str) -> usize {
        self.streams.get(task).map_or(0, |s| s.consumed)
    }

    /// Whether `task` has used up its example budget.
    pub fn exhausted(&self, task: &TaskSpec) -> bool {
        task.max_examples.is_some_and(|max| self.consumed(&task.name) >= max)
    }

    /// Next `batch_size` examples of `task`, drawn without replacement. When
    /// the current epoch cannot fill a batch a new epoch starts.
    pub fn build_batch(&mut self, task: &TaskSpec, stage: &StageConfig) -> Result<Vec<TrainingExample>> {
        if !task.active_in(stage.stage) {
            return Err(Error::Config(format!("task {} not active in {}", task.name, stage.stage)));
        }
        self.next(task, task.batch_size_for(stage))
    }

    pub fn next(&mut self, task: &TaskSpec, batch_size: usize) -> Result<Vec<TrainingExample>> {
        let n = task.examples.len();
        if batch_size == 0 || batch_size > n {
            return Err(Error::Config(format!(
                "task {}: batch size {batch_size} invalid for {n} examples",
                task.name
            )));
        }
        let seed = self.seed;
        let stream = self
            .streams
            .entry(task.name.clone())
            .or_insert_with(|| TaskStream {
                epoch: 0,
                order: shuffled(n, seed, &task.name, 0),
                cursor: 0,
                consumed: 0,
            });
        if stream.cursor + batch_size > n {
            stream.epoch += 1;
            stream.order = shuffled(n, seed, &task.name, stream.epoch);
            stream.cursor = 0;
        }
        let batch = stream.order[stream.cursor..stream.cursor + batch_size]
            .iter()
            .map(|&i| task.examples[i].clone())
            .collect();
        stream.cursor += batch_size;
        stream.consumed += batch_size;
        Ok(batch)
    }
}
