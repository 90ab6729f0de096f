use std::path::Path;
use std::process::{Command, Output};

fn gemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gemb")).args(args).output().expect("spawn gemb")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny corpus plus a run config small enough to train in well under a second.
fn tiny_run(dir: &Path, lr: f64) -> std::path::PathBuf {
    let out = gemb(&["experiments", "generate", "--out", p(dir), "--concepts", "8", "--forms", "3", "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let cfg = serde_json::json!({
        "seed": 5,
        "encoder": {"vocab_size": 266, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16,
                    "max_seq_len": 24, "d_out": 4, "mrl_dims": [2, 4]},
        "loss": {"temperature": 0.1, "mrl_dims": [2, 4]},
        "tasks": [{"name": "match", "dataset": "train.jsonl", "batch_size": 4}],
        "pft": {"steps": 3, "batch_size": 4, "learning_rate": lr},
        "ft": {"steps": 3, "batch_size": 4, "learning_rate": lr},
        "eval": {"corpus": "corpus.jsonl", "queries": "queries.jsonl", "qrels": "qrels.tsv",
                 "metrics": ["recall@1", "ndcg@10"]}
    });
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn train_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_run(d, 1e-3);
    for run in ["a", "b"] {
        let out = gemb(&[
            "train",
            "--config",
            p(&cfg),
            "--out",
            p(&d.join(format!("{run}.ckpt"))),
            "--report",
            p(&d.join(format!("{run}.json"))),
            "--log",
            p(&d.join(format!("{run}.tsv"))),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.json"), read("b.json"));
    let log = String::from_utf8(read("a.tsv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().next().unwrap().starts_with("pft\t0\tmatch\t"));

    // a different seed gives a different model
    let out = gemb(&["train", "--config", p(&cfg), "--out", p(&d.join("c.ckpt")), "--seed-override", "6"]);
    assert!(out.status.success());
    assert_ne!(read("a.ckpt"), read("c.ckpt"));
}

#[test]
fn soup_of_one_checkpoint_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_run(d, 1e-3);
    assert!(gemb(&["train", "--config", p(&cfg), "--out", p(&d.join("a.ckpt"))]).status.success());
    let a = format!("{}:1", p(&d.join("a.ckpt")));
    let out = gemb(&["soup", "--in", &a, "--in", &a, "--out", p(&d.join("s.ckpt"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("s.ckpt")).unwrap());

    let bad = format!("{}:-1", p(&d.join("a.ckpt")));
    assert_eq!(gemb(&["soup", "--in", &bad, "--out", p(&d.join("t.ckpt"))]).status.code(), Some(1));
}

#[test]
fn eval_on_a_perfect_toy_corpus_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let docs = "{\"id\":\"d1\",\"embedding\":[1.0,0.0,0.0]}\n{\"id\":\"d2\",\"embedding\":[0.0,1.0,0.0]}\n{\"id\":\"d3\",\"embedding\":[0.0,0.0,2.0]}\n";
    let queries = "{\"id\":\"q1\",\"embedding\":[0.9,0.1,0.0]}\n{\"id\":\"q2\",\"embedding\":[0.0,3.0,0.5]}\n";
    std::fs::write(d.join("docs.jsonl"), docs).unwrap();
    std::fs::write(d.join("q.jsonl"), queries).unwrap();
    std::fs::write(d.join("qrels.tsv"), "# query\tdoc\tgrade\nq1\td1\t1\nq2\td2\t2\n").unwrap();
    let out = gemb(&["index", "--in", p(&d.join("docs.jsonl")), "--out", p(&d.join("i.idx"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = gemb(&[
        "eval",
        "--index",
        p(&d.join("i.idx")),
        "--queries",
        p(&d.join("q.jsonl")),
        "--qrels",
        p(&d.join("qrels.tsv")),
        "--metric",
        "recall@1",
        "--metric",
        "ndcg@10",
        "--metric",
        "mrr@10",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        assert_eq!(r["mean"], 1.0, "{r}");
        assert_eq!(r["n_queries"], 2);
    }
}

#[test]
fn embed_index_search_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_run(d, 1e-3);
    let ck = d.join("m.ckpt");
    assert!(gemb(&["train", "--config", p(&cfg), "--out", p(&ck)]).status.success());

    let out = gemb(&["embed", "--ckpt", p(&ck), "--in", p(&d.join("corpus.jsonl")), "--out", p(&d.join("e.jsonl")), "--dim", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let first = std::fs::read_to_string(d.join("e.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["embedding"].as_array().unwrap().len(), 2);

    assert!(gemb(&["index", "--ckpt", p(&ck), "--in", p(&d.join("corpus.jsonl")), "--out", p(&d.join("i.idx"))])
        .status
        .success());
    let out = gemb(&["search", "--index", p(&d.join("i.idx")), "--ckpt", p(&ck), "--in", p(&d.join("queries.jsonl")), "--k", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 8 * 3);
    let cols: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(cols.len(), 4);
    assert_eq!(cols[1], "1");

    // eval through the config binding agrees with the report written by train
    let out = gemb(&["eval", "--config", p(&cfg), "--ckpt", p(&ck)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(gemb(&["train", "--config", p(&cfg), "--out", p(&ck), "--report", p(&d.join("r.json"))]).status.success());
    assert_eq!(out.stdout, std::fs::read(d.join("r.json")).unwrap());

    // an unsupported prefix width is a config error
    let out = gemb(&["embed", "--ckpt", p(&ck), "--in", p(&d.join("corpus.jsonl")), "--out", p(&d.join("x.jsonl")), "--dim", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_eq!(gemb(&[]).status.code(), Some(1));
    assert_eq!(gemb(&["train"]).status.code(), Some(1));
    assert_eq!(gemb(&["--help"]).status.code(), Some(0));

    // malformed dataset line: data error naming the line
    let cfg = tiny_run(d, 1e-3);
    let mut train = std::fs::read_to_string(d.join("train.jsonl")).unwrap();
    train.push_str("{not json\n");
    let bad_line = train.lines().count();
    std::fs::write(d.join("train.jsonl"), train).unwrap();
    let out = gemb(&["train", "--config", p(&cfg), "--out", p(&d.join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(&format!("line {bad_line}")), "{}", stderr(&out));
    assert!(!d.join("m.ckpt").exists());

    // an absurd learning rate blows up the loss: numerical abort
    let dir2 = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir2.path(), 1e300);
    let out = gemb(&["train", "--config", p(&cfg), "--out", p(&dir2.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("numerical abort"));

    let out = gemb(&["eval", "--ckpt", "/nonexistent.ckpt", "--corpus", "a", "--queries", "b", "--qrels", "c"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let out = gemb(&["selfcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 8);
}
