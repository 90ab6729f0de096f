//! End-to-end workflows shared by the command line and the experiments:
//! config-driven training, file-driven evaluation and the canned synthetic
//! scenarios.

use std::path::Path;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    evaluate_encoder, mrl_sweep, run_pft_ft_comparison, run_soup_ablation, task_string_gap, Domain,
    PftFtReport, SoupAblationReport, SyntheticCorpus, SyntheticPairGenerator,
};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{derive_seed, EvalEntry, RunConfig};
use crate::io::files::{read_qrels, read_texts};
use crate::loss::LossConfig;
use crate::metrics::{EvalReport, MetricSpec};
use crate::training::{check_examples, train_stage, Stage, StageConfig, StepRecord, TaskSpec};

/// Trains PFT then FT as configured. Everything is validated (including
/// every example's token length) before the first step. With `ckpt_dir` and
/// `checkpoint_every` set, intermediate checkpoints are written as
/// `{stage}-{step}.ckpt`.
pub fn train_from_config(
    cfg: &RunConfig,
    ckpt_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Encoder> {
    cfg.validate()?;
    let tasks = cfg.load_tasks()?;
    let mut encoder = Encoder::init(cfg.encoder.clone(), cfg.init_seed())?;
    let stages = [cfg.pft_stage(), cfg.ft_stage()];
    for s in &stages {
        s.validate(&tasks)?;
    }
    check_examples(&tasks, &encoder)?;

    for stage in &stages {
        let mut hook = |rec: &StepRecord, enc: &Encoder| -> Result<()> {
            on_step(rec)?;
            if let (Some(dir), Some(every)) = (ckpt_dir, cfg.checkpoint_every) {
                if (rec.step + 1).is_multiple_of(every) {
                    let p = dir.join(format!("{}-{}.ckpt", rec.stage, rec.step + 1));
                    Checkpoint::from(enc.clone()).save(p)?;
                }
            }
            Ok(())
        };
        let report = train_stage(&mut encoder, stage, &tasks, &cfg.loss, &mut hook)?;
        if report.stopped_early {
            log::warn!("{} stopped after {} steps: example budgets exhausted", stage.stage, report.records.len());
        }
    }
    Ok(encoder)
}

/// Runs the config's eval binding against `encoder`.
pub fn evaluate_binding(encoder: &Encoder, eval: &EvalEntry, strip_task: bool) -> Result<Vec<EvalReport>> {
    let corpus = read_texts(&eval.corpus)?;
    let queries = read_texts(&eval.queries)?;
    let qrels = read_qrels(&eval.qrels)?;
    evaluate_encoder(encoder, &corpus, &queries, &qrels, &eval.metrics, eval.dim, strip_task)
}

/// Byte-stable JSON for a list of reports.
pub fn reports_json(reports: &[EvalReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

/// Writes a synthetic corpus and a run config over it into `dir`, returning
/// the config path. Uses the default desk encoder.
pub fn write_demo(dir: &Path, seed: u64, pft_steps: usize, ft_steps: usize) -> Result<std::path::PathBuf> {
    let data = SyntheticPairGenerator::new(256, 4, seed).generate()?;
    data.write(dir)?;
    let enc = EncoderConfig::default();
    let cfg = serde_json::json!({
        "seed": seed,
        "encoder": enc,
        "loss": {"temperature": 0.05, "mrl_dims": enc.mrl_dims},
        "tasks": [{"name": "match", "dataset": "train.jsonl", "batch_size": 32, "task_string_dropout_p": 0.2}],
        "pft": {"steps": pft_steps, "batch_size": 32, "learning_rate": 1e-3},
        "ft": {"steps": ft_steps, "batch_size": 32, "learning_rate": 1e-3},
        "eval": {"corpus": "corpus.jsonl", "queries": "queries.jsonl", "qrels": "qrels.tsv",
                 "metrics": ["recall@1", "mrr@10", "ndcg@10"]}
    });
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub const DESK_BATCH: usize = 32;

fn desk_loss() -> LossConfig {
    LossConfig::new(0.05, EncoderConfig::default().mrl_dims)
}

fn quiet(_: &StepRecord, _: &Encoder) -> Result<()> {
    Ok(())
}

/// Paired-concept convergence run: 256 concepts with 4 surface forms, FT
/// only, on the default desk encoder.
#[derive(Clone, Debug)]
pub struct ConvergenceRun {
    pub data: SyntheticCorpus,
    pub encoder: Encoder,
    pub steps: usize,
}

pub fn convergence_run(seed: u64, ft_steps: usize, task_string_dropout_p: f64) -> Result<ConvergenceRun> {
    let data = SyntheticPairGenerator::new(256, 4, seed).generate()?;
    let mut encoder = Encoder::init(EncoderConfig::default(), derive_seed(seed, "init"))?;
    let mut task = data.task("match", DESK_BATCH);
    task.task_string_dropout_p = task_string_dropout_p;
    let mut stage = StageConfig::ft(ft_steps, DESK_BATCH, derive_seed(seed, "ft"));
    stage.learning_rate = 1e-3;
    let report = train_stage(&mut encoder, &stage, &[task], &desk_loss(), &mut quiet)?;
    Ok(ConvergenceRun {
        data,
        encoder,
        steps: report.records.len(),
    })
}

impl ConvergenceRun {
    pub fn metric(&self, spec: &str, dim: Option<usize>, strip_task: bool) -> Result<f64> {
        let spec: MetricSpec = spec.parse()?;
        let r = evaluate_encoder(
            &self.encoder,
            &self.data.corpus,
            &self.data.queries,
            &self.data.qrels,
            &[spec],
            dim,
            strip_task,
        )?;
        Ok(r[0].mean)
    }

    pub fn mrl_sweep(&self) -> Result<Vec<(usize, f64)>> {
        mrl_sweep(&self.encoder, &self.data, "recall@1".parse()?)
    }

    pub fn task_string_gap(&self) -> Result<(f64, f64)> {
        task_string_gap(&self.encoder, &self.data, "recall@1".parse()?)
    }
}

/// Two synthetic domains with distinct core alphabets and task strings.
pub fn two_domains(seed: u64) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
    let ga = SyntheticPairGenerator::new(256, 4, seed);
    let mut gb = ga.clone().with_domain(Domain::B);
    gb.task = "pair".to_string();
    Ok((ga.generate()?, gb.generate()?))
}

/// Base model trained on both domains (domain A under-sampled), then the
/// soup ablation with extra domain-A data.
pub fn soup_ablation_scenario(seed: u64) -> Result<SoupAblationReport> {
    let (da, db) = two_domains(seed)?;
    let loss = desk_loss();
    let mut ta = da.task("domain-a", DESK_BATCH);
    ta.sampling_rate = 0.2;
    let mut tb = db.task("domain-b", DESK_BATCH);
    tb.sampling_rate = 0.8;
    let mut base = Encoder::init(EncoderConfig::default(), derive_seed(seed, "init"))?;
    let pft = StageConfig::pft(200, DESK_BATCH, derive_seed(seed, "pft"));
    train_stage(&mut base, &pft, &[ta, tb], &loss, &mut quiet)?;
    let mut ft = StageConfig::ft(300, DESK_BATCH, derive_seed(seed, "ft"));
    ft.learning_rate = 1e-3;
    run_soup_ablation(
        &base,
        &da.extra_task("domain-a-extra", DESK_BATCH),
        &ft,
        &loss,
        &da,
        &db,
        "ndcg@10".parse()?,
    )
}

/// PFT on domain B only, then FT that adds a domain-A task active only in FT.
pub fn pft_ft_scenario(seed: u64, pft_steps: usize, ft_steps: usize) -> Result<PftFtReport> {
    let (da, db) = two_domains(seed)?;
    let mut ta = da.task("domain-a", DESK_BATCH);
    ta.stages = vec![Stage::Ft];
    let tb = db.task("domain-b", DESK_BATCH);
    let init = Encoder::init(EncoderConfig::default(), derive_seed(seed, "init"))?;
    let pft = StageConfig::pft(pft_steps, DESK_BATCH, derive_seed(seed, "pft"));
    let mut ft = StageConfig::ft(ft_steps, DESK_BATCH, derive_seed(seed, "ft"));
    ft.learning_rate = 1e-3;
    let tasks: Vec<TaskSpec> = vec![ta, tb];
    run_pft_ft_comparison(
        &init,
        &tasks,
        &pft,
        &ft,
        &desk_loss(),
        &[("domain-a".to_string(), da), ("domain-b".to_string(), db)],
        "ndcg@10".parse()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_demo(dir: &Path) -> RunConfig {
        let data = SyntheticPairGenerator::new(8, 3, 1).generate().unwrap();
        data.write(dir).unwrap();
        let cfg = serde_json::json!({
            "seed": 5,
            "encoder": {"vocab_size": 266, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16,
                        "max_seq_len": 24, "d_out": 4, "mrl_dims": [2, 4]},
            "loss": {"temperature": 0.1, "mrl_dims": [2, 4]},
            "tasks": [{"name": "match", "dataset": "train.jsonl", "batch_size": 4}],
            "pft": {"steps": 3, "batch_size": 4},
            "ft": {"steps": 3, "batch_size": 4},
            "eval": {"corpus": "corpus.jsonl", "queries": "queries.jsonl", "qrels": "qrels.tsv",
                     "metrics": ["recall@1", "mrr@10"], "dim": 2},
            "checkpoint_every": 2
        });
        let p = dir.join("run.json");
        std::fs::write(&p, cfg.to_string()).unwrap();
        RunConfig::load(&p).unwrap()
    }

    #[test]
    fn config_training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_demo(dir.path());
        let mut n = 0;
        let a = train_from_config(&cfg, Some(dir.path()), &mut |_| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 6);
        assert!(dir.path().join("pft-2.ckpt").exists());
        assert!(dir.path().join("ft-2.ckpt").exists());
        let b = train_from_config(&cfg, None, &mut |_| Ok(())).unwrap();
        assert_eq!(a, b);
        let eval = cfg.eval.as_ref().unwrap();
        let ra = reports_json(&evaluate_binding(&a, eval, false).unwrap());
        let rb = reports_json(&evaluate_binding(&b, eval, false).unwrap());
        assert_eq!(ra, rb);
        assert!(ra.contains("\"dim\": 2"));
    }

    #[test]
    fn overlong_examples_fail_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_demo(dir.path());
        cfg.encoder.max_seq_len = 6;
        let mut steps = 0;
        let err = train_from_config(&cfg, None, &mut |_| {
            steps += 1;
            Ok(())
        });
        assert!(matches!(err, Err(Error::Config(_))));
        assert_eq!(steps, 0);
    }
}
