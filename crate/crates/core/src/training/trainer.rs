use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::optimizer::{optimizer_step, AdamState};
use super::sampler::{apply_task_dropout, draw, BatchBuilder};
use super::{Stage, StageConfig, TaskSpec, TrainingExample};
use crate::encoder::{Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::io::tokenizer::{ByteTokenizer, Modality};
use crate::loss::{content_key, duplicate_mask, mrl_loss_graph, BatchVars, LossConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub task: String,
    pub loss: f64,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\t{}\t{}\t{:.6}", self.stage, self.step, self.task, self.loss)
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub records: Vec<StepRecord>,
    /// Set when every task ran out of its example budget before `steps`.
    pub stopped_early: bool,
}

/// Tokenized query (with task prefix), positive and optional hard negative.
pub(crate) struct PreparedExample {
    pub query: TokenSequence,
    pub positive: TokenSequence,
    pub negative: Option<TokenSequence>,
}

pub(crate) fn prepare(tok: &ByteTokenizer, ex: &TrainingExample) -> Result<PreparedExample> {
    let modality = Modality::parse(&ex.modality_tag)?;
    let q = tok.tokenize_with_marker(&ex.query, modality.query)?;
    let query = tok.compose(ex.task.as_deref(), &q)?;
    let positive = tok.tokenize_with_marker(&ex.positive, modality.target)?;
    let negative = ex
        .hard_negative
        .as_deref()
        .map(|n| tok.tokenize_with_marker(n, modality.target))
        .transpose()?;
    Ok(PreparedExample {
        query,
        positive,
        negative,
    })
}

/// Checks every example of every task tokenizes within the encoder limits.
pub(crate) fn check_examples(tasks: &[TaskSpec], encoder: &Encoder) -> Result<()> {
    let tok = encoder.tokenizer();
    for t in tasks {
        t.validate()?;
        for (i, ex) in t.examples.iter().enumerate() {
            let p = prepare(&tok, ex)
                .map_err(|e| Error::Config(format!("task {} example {i}: {e}", t.name)))?;
            for s in [Some(&p.query), Some(&p.positive), p.negative.as_ref()].into_iter().flatten() {
                s.check(&encoder.config)
                    .map_err(|e| Error::Config(format!("task {} example {i}: {e}", t.name)))?;
            }
        }
    }
    Ok(())
}

fn batch_digest(batch: &[TrainingExample]) -> String {
    let mut h = Sha256::new();
    for ex in batch {
        h.update(ex.query.as_bytes());
        h.update([0]);
        h.update(ex.positive.as_bytes());
        h.update([0]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs one training stage in place on `encoder`. `on_step` sees every step's
/// record and the updated encoder, and may fail to abort training.
pub fn train_stage(
    encoder: &mut Encoder,
    stage: &StageConfig,
    tasks: &[TaskSpec],
    loss_cfg: &LossConfig,
    on_step: &mut dyn FnMut(&StepRecord, &Encoder) -> Result<()>,
) -> Result<StageReport> {
    stage.validate(tasks)?;
    loss_cfg.validate(encoder.config.d_out)?;
    check_examples(tasks, encoder)?;

    let tok = encoder.tokenizer();
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut batches = BatchBuilder::new(stage.seed);
    let mut adam = AdamState::new();
    let mut report = StageReport::default();

    for step in 0..stage.steps {
        let rates: Vec<f64> = tasks
            .iter()
            .map(|t| {
                if t.active_in(stage.stage) && !batches.exhausted(t) {
                    t.sampling_rate
                } else {
                    0.0
                }
            })
            .collect();
        let Some(idx) = draw(&rates, &mut rng) else {
            if tasks.iter().any(|t| t.active_in(stage.stage) && batches.exhausted(t)) {
                log::info!("{}: every task exhausted its budget after {step} steps", stage.stage);
                report.stopped_early = true;
                break;
            }
            return Err(Error::Config(format!(
                "no task with positive sampling rate in {}",
                stage.stage
            )));
        };
        let task = &tasks[idx];
        let raw = batches.build_batch(task, stage)?;
        let batch: Vec<TrainingExample> = raw
            .iter()
            .map(|ex| apply_task_dropout(ex, task.task_string_dropout_p, &mut rng))
            .collect();

        let loss = train_step(encoder, &tok, stage, &batch, loss_cfg, &mut adam)
            .map_err(|e| match e {
                Error::Numerical { detail, .. } => Error::Numerical {
                    step,
                    task: task.name.clone(),
                    digest: batch_digest(&batch),
                    detail,
                },
                other => other,
            })?;
        let record = StepRecord {
            stage: stage.stage,
            step,
            task: task.name.clone(),
            loss,
        };
        on_step(&record, encoder)?;
        report.records.push(record);
    }
    Ok(report)
}

fn train_step(
    encoder: &mut Encoder,
    tok: &ByteTokenizer,
    stage: &StageConfig,
    batch: &[TrainingExample],
    loss_cfg: &LossConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let prepared = batch
        .iter()
        .map(|ex| prepare(tok, ex))
        .collect::<Result<Vec<_>>>()?;
    let b = prepared.len();
    // Hard negatives are an FT-stage feature and used only when every row has one.
    let use_hard = stage.stage == Stage::Ft && prepared.iter().all(|p| p.negative.is_some());

    let mut seqs: Vec<&TokenSequence> = prepared.iter().map(|p| &p.query).collect();
    seqs.extend(prepared.iter().map(|p| &p.positive));
    if use_hard {
        seqs.extend(prepared.iter().filter_map(|p| p.negative.as_ref()));
    }

    let mut g = Graph::new();
    let vars = encoder.bind(&mut g, true);
    let emb = encoder.embed_graph(&mut g, &vars, &seqs)?;
    let batch_vars = BatchVars {
        queries: g.slice_rows(emb, 0, b)?,
        positives: g.slice_rows(emb, b, 2 * b)?,
        hard_negatives: if use_hard {
            Some(g.slice_rows(emb, 2 * b, 3 * b)?)
        } else {
            None
        },
    };
    let query_keys: Vec<u64> = batch.iter().map(|e| content_key(&e.query)).collect();
    let positive_keys: Vec<u64> = batch.iter().map(|e| content_key(&e.positive)).collect();
    let mask = duplicate_mask(&query_keys, &positive_keys)?;
    let loss = match mrl_loss_graph(&mut g, &batch_vars, &mask, loss_cfg) {
        Ok(l) => l,
        Err(Error::Domain(d)) => {
            return Err(Error::Numerical {
                step: 0,
                task: String::new(),
                digest: String::new(),
                detail: d,
            })
        }
        Err(e) => return Err(e),
    };
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            task: String::new(),
            digest: String::new(),
            detail: format!("loss is {value}"),
        });
    }
    let mut grads = g.backward(loss)?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, v) in &vars {
        let grad = grads
            .take(*v)
            .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape().to_vec()));
        by_name.insert(name.clone(), grad);
    }
    if let Some(max_norm) = stage.max_grad_norm {
        let norm = by_name
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            by_name
                .values_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    optimizer_step(&mut encoder.params, &by_name, adam, stage.learning_rate)?;
    Ok(value)
}
