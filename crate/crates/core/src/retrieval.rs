//! Exact cosine-similarity index with deterministic top-k search.
//!
//! Index file layout:
//!
//! ```text
//! magic    8 bytes  "GEMB2IDX"
//! version  u32 LE   1
//! dim      u32 LE
//! count    u64 LE
//! ids      count × (u32 LE byte length, UTF-8 bytes)
//! matrix   count × dim f32 LE
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::io::files::TextRecord;
use crate::io::tokenizer::Modality;
use crate::tensor::{kernels, Tensor};

pub const INDEX_MAGIC: &[u8; 8] = b"GEMB2IDX";
pub const INDEX_VERSION: u32 = 1;

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = kernels::dot(v, v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// First `m` coordinates of `e`, L2-renormalized. `m` must be one of the
/// trained prefix sizes.
pub fn truncate_embedding(e: &[f64], m: usize, mrl_dims: &[usize]) -> Result<Vec<f64>> {
    if !mrl_dims.contains(&m) {
        return Err(Error::Config(format!("dim {m} is not one of mrl_dims {mrl_dims:?}")));
    }
    if m > e.len() {
        return Err(Error::dim("truncate_embedding", format!("prefix {m} of a {}-vector", e.len())));
    }
    normalized(&e[..m]).ok_or_else(|| Error::Domain(format!("zero-norm {m}-prefix")))
}

/// Truncates every row of an N×d matrix.
pub fn truncate_rows(t: &Tensor, m: usize, mrl_dims: &[usize]) -> Result<Tensor> {
    let (n, _) = t.dims2()?;
    let mut data = Vec::with_capacity(n * m);
    for r in 0..n {
        data.extend(truncate_embedding(t.row(r), m, mrl_dims)?);
    }
    Tensor::matrix(n, m, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    matrix: Tensor,
    dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

pub fn build_index(ids: Vec<String>, embeddings: &Tensor) -> Result<RetrievalIndex> {
    let (n, m) = embeddings.dims2()?;
    if n != ids.len() {
        return Err(Error::Input(format!("{} ids for {n} embedding rows", ids.len())));
    }
    if n == 0 || m == 0 {
        return Err(Error::Input("index needs at least one non-empty row".into()));
    }
    let mut seen = HashSet::with_capacity(n);
    let mut data = Vec::with_capacity(n * m);
    for (r, id) in ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(Error::Input(format!("duplicate document id {id:?} at row {r}")));
        }
        let row = normalized(embeddings.row(r))
            .ok_or_else(|| Error::Input(format!("row {r} ({id:?}) has zero or non-finite norm")))?;
        data.extend(row);
    }
    Ok(RetrievalIndex {
        ids,
        matrix: Tensor::matrix(n, m, data)?,
        dim: m,
    })
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl RetrievalIndex {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    /// Top `min(k, N)` documents by cosine similarity to `query`.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(Error::Input(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        let q = normalized(query).ok_or_else(|| Error::Input("zero-norm query".into()))?;
        let mut scored: Vec<(f64, &str)> = (0..self.len())
            .map(|r| (kernels::dot(self.matrix.row(r), &q), self.ids[r].as_str()))
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        Ok(scored
            .into_iter()
            .map(|(score, id)| Hit {
                id: id.to_string(),
                score,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for &v in self.matrix.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses an index file. Rows are renormalized after widening.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != INDEX_MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.err(8, &format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let at = r.pos;
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err(at, "id is not UTF-8"))?;
            ids.push(id.to_string());
        }
        let at = r.pos;
        let need = n.checked_mul(dim).and_then(|c| c.checked_mul(4));
        if need != Some(bytes.len() - at) {
            return Err(r.err(at, &format!("matrix is {} bytes, expected {n}×{dim} floats", bytes.len() - at)));
        }
        let data: Vec<f64> = bytes[at..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Tensor::matrix(n, dim, data)?;
        build_index(ids, &m).map_err(|e| r.err(at, &e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        RetrievalIndex::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, detail: &str) -> Error {
        Error::parse(self.path, format!("byte {at}"), detail)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err(self.pos, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Embeds text records. Queries keep their task string unless `strip_task`;
/// the record's modality tag picks the marker (query side for queries, target
/// side for documents).
pub fn embed_texts(encoder: &Encoder, records: &[TextRecord], as_query: bool, strip_task: bool) -> Result<Tensor> {
    let tok = encoder.tokenizer();
    let seqs = records
        .iter()
        .map(|r| {
            let modality = Modality::parse(r.modality_tag.as_deref().unwrap_or("text"))?;
            let marker = if as_query { modality.query } else { modality.target };
            let seq = tok.tokenize_with_marker(&r.text, marker)?;
            let task = if strip_task { None } else { r.task.as_deref() };
            tok.compose(task, &seq)
                .map_err(|e| Error::Input(format!("record {:?}: {e}", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    encoder.embed_batch(&seqs)
}
