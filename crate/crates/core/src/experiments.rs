//! Desk-scale experiments over synthetic paired-concept corpora: convergence,
//! the MRL dimension trade-off, fine-tune versus soup, PFT versus FT and
//! robustness to dropped task strings.
//!
//! A concept is a short core string drawn from a domain alphabet. Each of its
//! surface forms wraps the core in filler words drawn from a shared vowel
//! vocabulary, so two forms match exactly when their cores do.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::derive_seed;
use crate::io::files::{write_dataset, write_jsonl, write_qrels, TextRecord};
use crate::loss::LossConfig;
use crate::metrics::{evaluate, EvalReport, MetricSpec, Qrels};
use crate::retrieval::{build_index, embed_texts, truncate_rows};
use crate::soup::soup;
use crate::training::{train_stage, StageConfig, StepRecord, TaskSpec, TrainingExample};

const FILLERS: [&str; 12] = ["ai", "eo", "ou", "ui", "ya", "ey", "oi", "au", "ie", "uo", "ay", "ye"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    A,
    B,
}

impl Domain {
    fn alphabet(self) -> &'static [u8] {
        match self {
            Domain::A => b"bcdfghjklm",
            Domain::B => b"npqrstvwxz",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Domain::A => "a",
            Domain::B => "b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairGenerator {
    pub n_concepts: usize,
    pub surface_forms_per_concept: usize,
    /// Held-out corpus size (one document per concept, capped at `n_concepts`).
    pub eval_docs: usize,
    pub core_len: usize,
    pub task: String,
    pub domain: Domain,
    pub seed: u64,
}

impl SyntheticPairGenerator {
    pub fn new(n_concepts: usize, surface_forms_per_concept: usize, seed: u64) -> Self {
        SyntheticPairGenerator {
            n_concepts,
            surface_forms_per_concept,
            eval_docs: n_concepts.min(128),
            core_len: 4,
            task: "match".to_string(),
            domain: Domain::A,
            seed,
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return Err(Error::Config("need at least 2 concepts".into()));
        }
        if self.surface_forms_per_concept < 2 {
            return Err(Error::Config("need at least 2 surface forms per concept".into()));
        }
        // training forms plus two held-out forms per concept
        if self.surface_forms_per_concept + 2 > FILLERS.len() * FILLERS.len() {
            return Err(Error::Config("too many surface forms for the filler vocabulary".into()));
        }
        let space = (self.domain.alphabet().len() as f64).powi(self.core_len as i32);
        if self.core_len == 0 || (self.n_concepts as f64) > space / 2.0 {
            return Err(Error::Config(format!(
                "{} concepts do not fit cores of length {}",
                self.n_concepts, self.core_len
            )));
        }
        if self.eval_docs == 0 {
            return Err(Error::Config("eval_docs must be positive".into()));
        }
        Ok(())
    }

    fn cores(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let alphabet = self.domain.alphabet();
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(self.n_concepts);
        while out.len() < self.n_concepts {
            let core: String = (0..self.core_len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
                .collect();
            if seen.insert(core.clone()) {
                out.push(core);
            }
        }
        out
    }

    /// Distinct filler pairs for one concept: the training forms first, then
    /// two held-out forms for the evaluation query and document.
    fn forms(&self, core: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut pairs: Vec<(usize, usize)> = (0..FILLERS.len())
            .flat_map(|i| (0..FILLERS.len()).map(move |j| (i, j)))
            .collect();
        pairs.shuffle(rng);
        pairs
            .into_iter()
            .take(self.surface_forms_per_concept + 2)
            .map(|(i, j)| format!("{} {core} {}", FILLERS[i], FILLERS[j]))
            .collect()
    }

    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.domain.tag()));
        let cores = self.cores(&mut rng);
        let f = self.surface_forms_per_concept;
        let tag = self.domain.tag();
        let mut out = SyntheticCorpus::default();
        for (c, core) in cores.iter().enumerate() {
            let forms = self.forms(core, &mut rng);
            for (i, form) in forms[..f].iter().enumerate() {
                if i > 0 {
                    out.train.push(TrainingExample::new(&self.task, &forms[0], form));
                }
                for other in &forms[i + 1..f] {
                    if i > 0 {
                        out.extra.push(TrainingExample::new(&self.task, form, other));
                    }
                }
            }
            if c < self.eval_docs {
                let qid = format!("{tag}q{c:04}");
                let did = format!("{tag}d{c:04}");
                out.queries.push(TextRecord {
                    task: Some(self.task.clone()),
                    ..TextRecord::new(&qid, &forms[f])
                });
                out.corpus.push(TextRecord::new(&did, &forms[f + 1]));
                out.qrels.insert(&qid, &did, 1);
            }
            out.concepts.push(core.clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub concepts: Vec<String>,
    /// Form 0 paired with every other training form.
    pub train: Vec<TrainingExample>,
    /// Pairs among the non-initial training forms: more in-domain data over
    /// the same concepts, disjoint from `train` and from the held-out forms.
    pub extra: Vec<TrainingExample>,
    pub corpus: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    pub qrels: Qrels,
}

impl SyntheticCorpus {
    /// Writes `train.jsonl`, `corpus.jsonl`, `queries.jsonl` and `qrels.tsv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_dataset(dir.join("train.jsonl"), &self.train)?;
        write_jsonl(dir.join("corpus.jsonl"), &self.corpus)?;
        write_jsonl(dir.join("queries.jsonl"), &self.queries)?;
        write_qrels(dir.join("qrels.tsv"), &self.qrels)
    }

    pub fn task(&self, name: &str, batch_size: usize) -> TaskSpec {
        TaskSpec::new(name, self.train.clone(), batch_size)
    }

    pub fn extra_task(&self, name: &str, batch_size: usize) -> TaskSpec {
        TaskSpec::new(name, self.extra.clone(), batch_size)
    }
}

/// Embeds corpus and queries with `encoder`, truncates both to `dim` when
/// given, and scores `metrics`.
pub fn evaluate_encoder(
    encoder: &Encoder,
    corpus: &[TextRecord],
    queries: &[TextRecord],
    qrels: &Qrels,
    metrics: &[MetricSpec],
    dim: Option<usize>,
    strip_task: bool,
) -> Result<Vec<EvalReport>> {
    let mut docs = embed_texts(encoder, corpus, false, false)?;
    let mut qs = embed_texts(encoder, queries, true, strip_task)?;
    if let Some(m) = dim {
        docs = truncate_rows(&docs, m, &encoder.config.mrl_dims)?;
        qs = truncate_rows(&qs, m, &encoder.config.mrl_dims)?;
    }
    let index = build_index(corpus.iter().map(|r| r.id.clone()).collect(), &docs)?;
    let qids: Vec<String> = queries.iter().map(|r| r.id.clone()).collect();
    evaluate(&index, &qids, &qs, qrels, metrics)
}

fn mean_of(encoder: &Encoder, data: &SyntheticCorpus, metric: MetricSpec) -> Result<f64> {
    let r = evaluate_encoder(encoder, &data.corpus, &data.queries, &data.qrels, &[metric], None, false)?;
    Ok(r[0].mean)
}

fn quiet() -> impl FnMut(&StepRecord, &Encoder) -> Result<()> {
    |_, _| Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupRow {
    pub name: String,
    pub domain_a: f64,
    pub domain_b: f64,
    pub delta_a: f64,
    pub delta_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupAblationReport {
    pub metric: MetricSpec,
    pub rows: Vec<SoupRow>,
}

impl SoupAblationReport {
    pub fn row(&self, name: &str) -> Option<&SoupRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14}{:>10}{:>10}{:>10}{:>10}\n", "model", "A", "B", "dA", "dB");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14}{:>10.4}{:>10.4}{:>+10.4}{:>+10.4}",
                r.name, r.domain_a, r.domain_b, r.delta_a, r.delta_b
            );
        }
        s
    }
}

/// Fine-tunes `base` on extra domain-A data, then scores base, the fine-tune
/// and base/fine-tune soups at 2:1, 4:2 and 1:1 on both domains. Deltas are
/// relative to base, so the base row is zero by construction.
pub fn run_soup_ablation(
    base: &Encoder,
    extra_a: &TaskSpec,
    ft: &StageConfig,
    loss: &LossConfig,
    eval_a: &SyntheticCorpus,
    eval_b: &SyntheticCorpus,
    metric: MetricSpec,
) -> Result<SoupAblationReport> {
    let mut tuned = base.clone();
    train_stage(&mut tuned, ft, std::slice::from_ref(extra_a), loss, &mut quiet())?;

    let base_ck = Checkpoint::from(base.clone()).narrowed();
    let tuned_ck = Checkpoint::from(tuned).narrowed();
    let mut models: Vec<(String, Encoder)> = vec![
        ("base".into(), base_ck.clone().into_encoder()?),
        ("fine-tuned".into(), tuned_ck.clone().into_encoder()?),
    ];
    for (name, wb, wf) in [("soup 2:1", 2.0, 1.0), ("soup 4:2", 4.0, 2.0), ("soup 1:1", 1.0, 1.0)] {
        let s = soup(&[(&base_ck, wb), (&tuned_ck, wf)])?.narrowed();
        models.push((name.into(), s.into_encoder()?));
    }

    let mut rows = Vec::with_capacity(models.len());
    for (name, enc) in &models {
        let a = mean_of(enc, eval_a, metric)?;
        let b = mean_of(enc, eval_b, metric)?;
        rows.push(SoupRow {
            name: name.clone(),
            domain_a: a,
            domain_b: b,
            delta_a: 0.0,
            delta_b: 0.0,
        });
    }
    let (a0, b0) = (rows[0].domain_a, rows[0].domain_b);
    for r in &mut rows {
        r.delta_a = r.domain_a - a0;
        r.delta_b = r.domain_b - b0;
    }
    Ok(SoupAblationReport { metric, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PftFtRow {
    pub eval_set: String,
    pub pft: f64,
    pub ft: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PftFtReport {
    pub metric: MetricSpec,
    pub rows: Vec<PftFtRow>,
}

impl PftFtReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14}{:>10}{:>10}{:>10}\n", "eval", "pft", "ft", "delta");
        for r in &self.rows {
            let _ = writeln!(s, "{:<14}{:>10.4}{:>10.4}{:>+10.4}", r.eval_set, r.pft, r.ft, r.ft - r.pft);
        }
        s
    }
}

/// Trains PFT on `tasks`, snapshots, continues with FT (which may activate
/// FT-only tasks) and scores both checkpoints on every named eval set.
pub fn run_pft_ft_comparison(
    init: &Encoder,
    tasks: &[TaskSpec],
    pft: &StageConfig,
    ft: &StageConfig,
    loss: &LossConfig,
    evals: &[(String, SyntheticCorpus)],
    metric: MetricSpec,
) -> Result<PftFtReport> {
    let mut enc = init.clone();
    train_stage(&mut enc, pft, tasks, loss, &mut quiet())?;
    let after_pft = enc.clone();
    train_stage(&mut enc, ft, tasks, loss, &mut quiet())?;
    let rows = evals
        .iter()
        .map(|(name, data)| {
            Ok(PftFtRow {
                eval_set: name.clone(),
                pft: mean_of(&after_pft, data, metric)?,
                ft: mean_of(&enc, data, metric)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PftFtReport { metric, rows })
}

/// Metric at every trained prefix size.
pub fn mrl_sweep(encoder: &Encoder, data: &SyntheticCorpus, metric: MetricSpec) -> Result<Vec<(usize, f64)>> {
    encoder
        .config
        .mrl_dims
        .iter()
        .map(|&m| {
            let r = evaluate_encoder(encoder, &data.corpus, &data.queries, &data.qrels, &[metric], Some(m), false)?;
            Ok((m, r[0].mean))
        })
        .collect()
}

/// Metric with and without task strings on the queries.
pub fn task_string_gap(encoder: &Encoder, data: &SyntheticCorpus, metric: MetricSpec) -> Result<(f64, f64)> {
    let with = mean_of(encoder, data, metric)?;
    let without =
        evaluate_encoder(encoder, &data.corpus, &data.queries, &data.qrels, &[metric], None, true)?[0].mean;
    Ok((with, without))
}
