//! Line-oriented text formats: training datasets and text/embedding records
//! (JSON lines) and relevance judgments (TSV).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::Qrels;
use crate::training::TrainingExample;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Non-blank lines with 1-based line numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn line_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::parse(path, format!("line {line}"), detail)
}

fn string_field(obj: &Map<String, Value>, key: &str, required: bool, path: &Path, line: usize) -> Result<Option<String>> {
    match obj.get(key) {
        None | Some(Value::Null) if !required => Ok(None),
        None | Some(Value::Null) => Err(line_err(path, line, format!("missing field {key:?}"))),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(line_err(path, line, format!("field {key:?} must be a string"))),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<TrainingExample>,
    /// Count of fields that were present but not recognized.
    pub unknown_fields: usize,
}

const DATASET_FIELDS: [&str; 5] = ["task", "query", "positive", "negative", "modality_tag"];

/// Reads `{task, query, positive, negative?, modality_tag?}` lines. Unknown
/// fields are counted and reported with a warning; anything malformed is an
/// error located by line.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut ds = Dataset::default();
    for (line_no, line) in lines(path)? {
        let obj: Map<String, Value> =
            serde_json::from_str(&line).map_err(|e| line_err(path, line_no, e.to_string()))?;
        ds.unknown_fields += obj
            .keys()
            .filter(|k| !DATASET_FIELDS.contains(&k.as_str()))
            .count();
        let task = string_field(&obj, "task", true, path, line_no)?.unwrap_or_default();
        let query = string_field(&obj, "query", true, path, line_no)?.unwrap_or_default();
        let positive = string_field(&obj, "positive", true, path, line_no)?.unwrap_or_default();
        if query.is_empty() || positive.is_empty() {
            return Err(line_err(path, line_no, "query and positive must be non-empty"));
        }
        let negative = string_field(&obj, "negative", false, path, line_no)?;
        if negative.as_deref() == Some("") {
            return Err(line_err(path, line_no, "negative must be non-empty when present"));
        }
        let modality_tag = string_field(&obj, "modality_tag", false, path, line_no)?
            .unwrap_or_else(|| "text".to_string());
        crate::io::tokenizer::Modality::parse(&modality_tag)
            .map_err(|e| line_err(path, line_no, e.to_string()))?;
        ds.examples.push(TrainingExample {
            task: (!task.is_empty()).then_some(task),
            query,
            positive,
            hard_negative: negative,
            modality_tag,
        });
    }
    if ds.unknown_fields > 0 {
        log::warn!("{}: ignored {} unknown fields", path.display(), ds.unknown_fields);
    }
    Ok(ds)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let records: Vec<Value> = examples
        .iter()
        .map(|e| {
            let mut obj = Map::new();
            obj.insert("task".into(), Value::String(e.task.clone().unwrap_or_default()));
            obj.insert("query".into(), Value::String(e.query.clone()));
            obj.insert("positive".into(), Value::String(e.positive.clone()));
            if let Some(n) = &e.hard_negative {
                obj.insert("negative".into(), Value::String(n.clone()));
            }
            obj.insert("modality_tag".into(), Value::String(e.modality_tag.clone()));
            Value::Object(obj)
        })
        .collect();
    write_jsonl(path, &records)
}

/// A text to embed: corpus documents and evaluation queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_tag: Option<String>,
}

impl TextRecord {
    pub fn new(id: &str, text: &str) -> Self {
        TextRecord {
            id: id.to_string(),
            text: text.to_string(),
            task: None,
            modality_tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Vec<f64>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    lines(path)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str(&line).map_err(|e| line_err(path, n, e.to_string())))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_texts(path: impl AsRef<Path>) -> Result<Vec<TextRecord>> {
    let path = path.as_ref();
    let recs: Vec<TextRecord> = read_jsonl(path)?;
    if let Some(i) = recs.iter().position(|r| r.text.is_empty() || r.id.is_empty()) {
        return Err(Error::parse(path, format!("record {}", i + 1), "empty id or text"));
    }
    Ok(recs)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    let recs: Vec<EmbeddingRecord> = read_jsonl(path)?;
    if let Some(first) = recs.first() {
        let d = first.embedding.len();
        if let Some(i) = recs.iter().position(|r| r.embedding.len() != d || d == 0) {
            return Err(Error::parse(
                path,
                format!("record {}", i + 1),
                format!("embedding width differs from {d}"),
            ));
        }
    }
    Ok(recs)
}

/// Reads `query_id <TAB> doc_id <TAB> grade` lines. Lines starting with `#` are comments.
pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let mut map: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    for (n, line) in lines(path)? {
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [q, d, g] = cols.as_slice() else {
            return Err(line_err(path, n, format!("expected 3 tab-separated columns, got {}", cols.len())));
        };
        let grade: u32 = g
            .trim()
            .parse()
            .map_err(|_| line_err(path, n, format!("grade {g:?} is not a non-negative integer")))?;
        if q.is_empty() || d.is_empty() {
            return Err(line_err(path, n, "empty query or document id"));
        }
        map.entry(q.to_string()).or_default().insert(d.to_string(), grade);
    }
    Ok(Qrels::from_map(map))
}

pub fn write_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (q, docs) in qrels.iter() {
        for (d, g) in docs {
            writeln!(w, "{q}\t{d}\t{g}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
