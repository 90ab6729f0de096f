//! Ranking metrics (Recall@k, NDCG@k with linear gain, MRR@k) and the
//! evaluation loop that turns an index plus query embeddings into a report.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::RetrievalIndex;
use crate::tensor::Tensor;

/// Relevance grades per query id, then per document id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels(BTreeMap<String, BTreeMap<String, u32>>);

impl Qrels {
    pub fn from_map(map: BTreeMap<String, BTreeMap<String, u32>>) -> Self {
        Qrels(map)
    }

    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) {
        self.0
            .entry(query.to_string())
            .or_default()
            .insert(doc.to_string(), grade);
    }

    pub fn grades(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.0.get(query)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, u32>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Documents with a positive grade.
pub fn relevant_set(grades: &BTreeMap<String, u32>) -> HashSet<&str> {
    grades
        .iter()
        .filter(|(_, &g)| g > 0)
        .map(|(d, _)| d.as_str())
        .collect()
}

fn no_relevant() -> Error {
    Error::Input("query has no relevant documents".into())
}

pub fn recall_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(no_relevant());
    }
    let hits = ranking.iter().take(k).filter(|d| relevant.contains(*d)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

pub fn mrr_at_k(ranking: &[&str], relevant: &HashSet<&str>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(no_relevant());
    }
    Ok(ranking
        .iter()
        .take(k)
        .position(|d| relevant.contains(d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

/// Linear-gain NDCG: `Σ grade(d_i) / log2(i + 1)` over the top k, divided by
/// the same sum over the grade-descending ideal ranking.
pub fn ndcg_at_k(ranking: &[&str], grades: &BTreeMap<String, u32>, k: usize) -> Result<f64> {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| grades.get(*d).copied().unwrap_or(0) as f64 * discount(i))
        .sum();
    let mut ideal: Vec<u32> = grades.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| g as f64 * discount(i))
        .sum();
    if idcg == 0.0 {
        return Err(no_relevant());
    }
    Ok(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Recall,
    Ndcg,
    Mrr,
}

/// A metric with its cutoff, written `recall@1`, `ndcg@10`, `mrr@10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub k: usize,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, k: usize) -> Self {
        MetricSpec { kind, k }
    }

    pub fn score(&self, ranking: &[&str], grades: &BTreeMap<String, u32>) -> Result<f64> {
        match self.kind {
            MetricKind::Recall => recall_at_k(ranking, &relevant_set(grades), self.k),
            MetricKind::Mrr => mrr_at_k(ranking, &relevant_set(grades), self.k),
            MetricKind::Ndcg => ndcg_at_k(ranking, grades, self.k),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
            MetricKind::Mrr => "mrr",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad metric {s:?}, expected recall@k, ndcg@k or mrr@k"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let kind = match name.to_ascii_lowercase().as_str() {
            "recall" => MetricKind::Recall,
            "ndcg" => MetricKind::Ndcg,
            "mrr" => MetricKind::Mrr,
            _ => return Err(bad()),
        };
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        Ok(MetricSpec { kind, k })
    }
}

impl Serialize for MetricSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricSpec,
    pub k: usize,
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    pub n_queries: usize,
    pub n_corpus: usize,
    pub dim: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores every judged query against `index`. `query_embeddings` rows align
/// with `query_ids` and must already have the index's width. Queries without
/// a positive judgment are skipped with a warning; judged documents missing
/// from the index are an error.
pub fn evaluate(
    index: &RetrievalIndex,
    query_ids: &[String],
    query_embeddings: &Tensor,
    qrels: &Qrels,
    metrics: &[MetricSpec],
) -> Result<Vec<EvalReport>> {
    let (n, m) = query_embeddings.dims2()?;
    if n != query_ids.len() {
        return Err(Error::Input(format!("{} query ids for {n} embeddings", query_ids.len())));
    }
    if m != index.dim() {
        return Err(Error::Input(format!("queries have {m} dims, index has {}", index.dim())));
    }
    if metrics.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    let known: HashSet<&str> = index.ids().iter().map(String::as_str).collect();
    let mut missing: Vec<&str> = qrels
        .iter()
        .flat_map(|(_, docs)| docs.keys())
        .map(String::as_str)
        .filter(|d| !known.contains(d))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Input(format!("qrels reference documents missing from the index: {}", missing.join(", "))));
    }

    let k_max = metrics.iter().map(|s| s.k).max().unwrap_or(1);
    let mut per_query: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); metrics.len()];
    let mut skipped = 0usize;
    for (r, qid) in query_ids.iter().enumerate() {
        let Some(grades) = qrels.grades(qid).filter(|g| g.values().any(|&v| v > 0)) else {
            skipped += 1;
            continue;
        };
        let hits = index.search(query_embeddings.row(r), k_max)?;
        let ranking: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        for (spec, out) in metrics.iter().zip(per_query.iter_mut()) {
            out.insert(qid.clone(), spec.score(&ranking, grades)?);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without relevant documents were excluded");
    }
    if per_query[0].is_empty() {
        return Err(Error::Input("no query has a relevant document".into()));
    }
    Ok(metrics
        .iter()
        .zip(per_query)
        .map(|(spec, values)| EvalReport {
            metric: *spec,
            k: spec.k,
            mean: values.values().sum::<f64>() / values.len() as f64,
            n_queries: values.len(),
            per_query: values,
            n_corpus: index.len(),
            dim: index.dim(),
        })
        .collect())
}
