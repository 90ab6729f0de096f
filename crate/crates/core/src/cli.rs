//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
//! config error, 3 numerical abort during training.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::experiments::{evaluate_encoder, Domain, SyntheticPairGenerator};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::RunConfig;
use crate::io::files::{read_embeddings, read_qrels, read_texts, write_jsonl, EmbeddingRecord, TextRecord};
use crate::metrics::{evaluate, EvalReport, MetricSpec};
use crate::pipeline;
use crate::retrieval::{build_index, embed_texts, truncate_rows, RetrievalIndex};
use crate::soup::SoupRecipe;
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "gemb", version, about = "Train, evaluate and merge dual-encoder text embedding models")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run PFT then FT as described by a run config.
    Train(TrainArgs),
    /// Embed JSONL text records into a JSONL embedding file.
    Embed(EmbedArgs),
    /// Build a retrieval index from texts (with --ckpt) or from embeddings.
    Index(IndexArgs),
    /// Top-k search against an index.
    Search(SearchArgs),
    /// Score retrieval metrics and write a JSON report.
    Eval(EvalArgs),
    /// Weighted average of checkpoints: --in a.ckpt:2 --in b.ckpt:1.
    Soup(SoupArgs),
    /// Check the core math against naive re-derivations.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthetic-corpus experiments.
    #[command(subcommand)]
    Experiments(ExperimentCommand),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Final checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed_override: Option<u64>,
    /// Write every step as `stage<TAB>step<TAB>task<TAB>loss`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the eval report here when the config has an eval binding.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for intermediate checkpoints (with `checkpoint_every`).
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// MRL prefix to keep (renormalized).
    #[arg(long)]
    dim: Option<usize>,
    /// Embed as queries: keep task strings and use query-side modality markers.
    #[arg(long)]
    query: bool,
    #[arg(long)]
    strip_task: bool,
}

#[derive(Debug, Args)]
struct IndexArgs {
    /// Text records with --ckpt, otherwise embedding records.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    dim: Option<usize>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// A single query text.
    #[arg(long, conflicts_with = "input")]
    query: Option<String>,
    #[arg(long, requires = "query")]
    task: Option<String>,
    /// JSONL query records; results are printed per query id.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Take corpus, queries, qrels, metrics and dim from this run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Prebuilt index; then --queries holds embedding records.
    #[arg(long, conflicts_with_all = ["config", "corpus"])]
    index: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// recall@k, ndcg@k or mrr@k; repeatable.
    #[arg(long)]
    metric: Vec<MetricSpec>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    strip_task: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SoupArgs {
    #[arg(long = "in", required = true, value_parser = parse_soup_input)]
    inputs: Vec<(PathBuf, f64)>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_soup_input(s: &str) -> std::result::Result<(PathBuf, f64), String> {
    let (path, w) = SoupRecipe::parse_input(s).map_err(|e| e.to_string())?;
    if !(w > 0.0 && w.is_finite()) {
        return Err(format!("weight {w} must be positive"));
    }
    Ok((path, w))
}

#[derive(Debug, Subcommand)]
enum ExperimentCommand {
    /// Write a synthetic paired-concept corpus (train, corpus, queries, qrels).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        concepts: usize,
        #[arg(long, default_value_t = 4)]
        forms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_domain, default_value = "a")]
        domain: Domain,
        #[arg(long, default_value = "match")]
        task: String,
    },
    /// Write a synthetic corpus plus a ready-to-train run config.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        pft_steps: usize,
        #[arg(long, default_value_t = 300)]
        ft_steps: usize,
    },
    /// Base vs fine-tuned vs soups on two synthetic domains.
    SoupAblation {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PFT checkpoint vs FT checkpoint when FT adds a new task.
    PftFt {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        pft_steps: usize,
        #[arg(long, default_value_t = 300)]
        ft_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the paired-concept task; report metrics, the MRL sweep and
    /// the task-string gap.
    Convergence {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.2)]
        dropout: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    match s {
        "a" | "A" => Ok(Domain::A),
        "b" | "B" => Ok(Domain::B),
        _ => Err(format!("unknown domain {s:?}, expected a or b")),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_encoder(path: &Path) -> Result<Encoder> {
    Checkpoint::load(path)?.into_encoder()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summarize(reports: &[EvalReport]) {
    for r in reports {
        eprintln!("{}\t{:.6}\t({} queries, {} docs, dim {})", r.metric, r.mean, r.n_queries, r.n_corpus, r.dim);
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::Soup(a) => {
            let recipe = SoupRecipe {
                inputs: a.inputs,
                output: a.out,
            };
            recipe.run()?;
            eprintln!("wrote {}", recipe.output.display());
            Ok(())
        }
        Command::Selfcheck { seed } => {
            let results = crate::selfcheck::run_all(seed);
            for r in &results {
                println!("{r}");
            }
            match results.iter().filter(|r| !r.passed).count() {
                0 => Ok(()),
                n => Err(Error::Numerical {
                    step: 0,
                    task: "selfcheck".into(),
                    digest: String::new(),
                    detail: format!("{n} checks failed"),
                }),
            }
        }
        Command::Experiments(e) => experiments(e),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed_override {
        cfg.seed = s;
    }
    if let Some(dir) = &a.ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &a.log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let total = cfg.pft.steps + cfg.ft.steps;
    let mut done = 0usize;
    let encoder = pipeline::train_from_config(&cfg, a.ckpt_dir.as_deref(), &mut |rec| {
        done += 1;
        if let (Some(w), Some(p)) = (log.as_mut(), a.log.as_ref()) {
            writeln!(w, "{rec}").map_err(|e| Error::io(p, e))?;
        }
        if done.is_multiple_of(50) || done == total {
            eprintln!("[{done}/{total}] {rec}");
        }
        Ok(())
    })?;
    if let (Some(mut w), Some(p)) = (log, a.log.as_ref()) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Checkpoint::from(encoder.clone()).save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    if let Some(eval) = &cfg.eval {
        // score what was saved, so reports agree with later `eval` runs
        let saved = load_encoder(&a.out)?;
        let reports = pipeline::evaluate_binding(&saved, eval, false)?;
        summarize(&reports);
        if let Some(p) = &a.report {
            write_text(p, &pipeline::reports_json(&reports))?;
        }
    }
    Ok(())
}

/// Unit-normalized rows at `dim` (default: full width, which is always a
/// nested width).
fn maybe_truncate(t: Tensor, dim: Option<usize>, enc: &Encoder) -> Result<Tensor> {
    truncate_rows(&t, dim.unwrap_or(enc.config.d_out), &enc.config.mrl_dims)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let enc = load_encoder(&a.ckpt)?;
    let records = read_texts(&a.input)?;
    let t = maybe_truncate(embed_texts(&enc, &records, a.query, a.strip_task)?, a.dim, &enc)?;
    let out: Vec<EmbeddingRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| EmbeddingRecord {
            id: r.id.clone(),
            embedding: t.row(i).to_vec(),
        })
        .collect();
    write_jsonl(&a.out, &out)?;
    eprintln!("embedded {} records", out.len());
    Ok(())
}

fn embeddings_matrix(recs: &[EmbeddingRecord]) -> Result<(Vec<String>, Tensor)> {
    let rows: Vec<Vec<f64>> = recs.iter().map(|r| r.embedding.clone()).collect();
    Ok((recs.iter().map(|r| r.id.clone()).collect(), Tensor::from_rows(&rows)?))
}

fn index(a: IndexArgs) -> Result<()> {
    let (ids, matrix) = match &a.ckpt {
        Some(ck) => {
            let enc = load_encoder(ck)?;
            let records = read_texts(&a.input)?;
            let t = maybe_truncate(embed_texts(&enc, &records, false, false)?, a.dim, &enc)?;
            (records.into_iter().map(|r| r.id).collect(), t)
        }
        None => embeddings_matrix(&read_embeddings(&a.input)?)?,
    };
    let idx = build_index(ids, &matrix)?;
    idx.save(&a.out)?;
    eprintln!("indexed {} documents at dim {}", idx.len(), idx.dim());
    Ok(())
}

/// Query embeddings narrowed to the index width when it is an MRL prefix.
fn queries_for(enc: &Encoder, idx: &RetrievalIndex, records: &[TextRecord]) -> Result<Tensor> {
    let t = embed_texts(enc, records, true, false)?;
    if idx.dim() == enc.config.d_out {
        Ok(t)
    } else {
        truncate_rows(&t, idx.dim(), &enc.config.mrl_dims)
    }
}

fn search(a: SearchArgs) -> Result<()> {
    let idx = RetrievalIndex::load(&a.index)?;
    let enc = load_encoder(&a.ckpt)?;
    let records = match (&a.query, &a.input) {
        (Some(q), None) => vec![TextRecord {
            task: a.task.clone(),
            ..TextRecord::new("query", q)
        }],
        (None, Some(p)) => read_texts(p)?,
        _ => return Err(Error::Input("give either --query or --in".into())),
    };
    let qs = queries_for(&enc, &idx, &records)?;
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        for (rank, hit) in idx.search(qs.row(i), a.k)?.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.id, rank + 1, hit.id, hit.score));
        }
    }
    print!("{out}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut metrics = a.metric.clone();
    let reports = if let Some(cfg_path) = &a.config {
        let cfg = RunConfig::load(cfg_path)?;
        let mut binding = cfg
            .eval
            .clone()
            .ok_or_else(|| Error::Config(format!("{} has no eval section", cfg_path.display())))?;
        if !metrics.is_empty() {
            binding.metrics = metrics;
        }
        if a.dim.is_some() {
            binding.dim = a.dim;
        }
        let ckpt = a.ckpt.as_ref().ok_or_else(|| Error::Input("--config needs --ckpt".into()))?;
        pipeline::evaluate_binding(&load_encoder(ckpt)?, &binding, a.strip_task)?
    } else {
        if metrics.is_empty() {
            metrics = vec!["recall@1".parse()?, "ndcg@10".parse()?, "mrr@10".parse()?];
        }
        let need = |p: &Option<PathBuf>, flag: &str| {
            p.clone().ok_or_else(|| Error::Input(format!("eval needs {flag}")))
        };
        let queries = need(&a.queries, "--queries")?;
        let qrels = read_qrels(need(&a.qrels, "--qrels")?)?;
        if let Some(index_path) = &a.index {
            let idx = RetrievalIndex::load(index_path)?;
            let (qids, q) = embeddings_matrix(&read_embeddings(&queries)?)?;
            evaluate(&idx, &qids, &q, &qrels, &metrics)?
        } else {
            let enc = load_encoder(&need(&a.ckpt, "--ckpt or --index")?)?;
            let corpus = read_texts(need(&a.corpus, "--corpus")?)?;
            let queries = read_texts(&queries)?;
            evaluate_encoder(&enc, &corpus, &queries, &qrels, &metrics, a.dim, a.strip_task)?
        }
    };
    summarize(&reports);
    emit(a.out.as_deref(), &pipeline::reports_json(&reports))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn experiments(e: ExperimentCommand) -> Result<()> {
    match e {
        ExperimentCommand::Generate {
            out,
            concepts,
            forms,
            seed,
            domain,
            task,
        } => {
            let mut g = SyntheticPairGenerator::new(concepts, forms, seed).with_domain(domain);
            g.task = task;
            let c = g.generate()?;
            c.write(&out)?;
            eprintln!(
                "wrote {} training pairs, {} queries, {} documents to {}",
                c.train.len(),
                c.queries.len(),
                c.corpus.len(),
                out.display()
            );
            Ok(())
        }
        ExperimentCommand::Demo {
            out,
            seed,
            pft_steps,
            ft_steps,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let p = pipeline::write_demo(&out, seed, pft_steps, ft_steps)?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        ExperimentCommand::SoupAblation { seed, out } => {
            let r = pipeline::soup_ablation_scenario(seed)?;
            eprint!("{}", r.to_table());
            emit(out.as_deref(), &json(&r))
        }
        ExperimentCommand::PftFt {
            seed,
            pft_steps,
            ft_steps,
            out,
        } => {
            let r = pipeline::pft_ft_scenario(seed, pft_steps, ft_steps)?;
            eprint!("{}", r.to_table());
            emit(out.as_deref(), &json(&r))
        }
        ExperimentCommand::Convergence {
            seed,
            steps,
            dropout,
            out,
        } => {
            let run = pipeline::convergence_run(seed, steps, dropout)?;
            let (with, without) = run.task_string_gap()?;
            let report = serde_json::json!({
                "steps": run.steps,
                "task_string_dropout_p": dropout,
                "recall@1": with,
                "mrr@10": run.metric("mrr@10", None, false)?,
                "recall@1_without_task_string": without,
                "mrl_recall@1": run.mrl_sweep()?.into_iter().map(|(d, v)| serde_json::json!({"dim": d, "recall@1": v})).collect::<Vec<_>>(),
            });
            eprintln!("recall@1 {with:.4} (without task string {without:.4})");
            emit(out.as_deref(), &json(&report))
        }
    }
}
