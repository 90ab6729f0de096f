//! Byte-level tokenizer. Every UTF-8 byte `b` maps to token `b + N_SPECIAL`;
//! ids below `N_SPECIAL` are reserved.

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const N_SPECIAL: u32 = 10;
/// Smallest vocabulary that covers every byte plus the specials.
pub const MIN_VOCAB: usize = N_SPECIAL as usize + 256;

/// Simulated non-text modalities; tag `i` is prefixed with marker token `2 + i`.
pub const MODALITY_TAGS: [&str; 8] = [
    "image", "audio", "video", "document", "code", "table", "speech", "mixed",
];

/// Which marker (if any) to prefix to queries and to targets of an example.
///
/// A tag is either a single modality (`"text"`, `"image"`, `"simulated-video"`)
/// applying to both sides, or a cross-modal `"text->image"` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Modality {
    pub query: Option<u32>,
    pub target: Option<u32>,
}

fn marker(tag: &str) -> Result<Option<u32>> {
    let tag = tag.trim();
    let tag = tag.strip_prefix("simulated-").unwrap_or(tag);
    if tag.is_empty() || tag == "text" {
        return Ok(None);
    }
    MODALITY_TAGS
        .iter()
        .position(|t| *t == tag)
        .map(|i| Some(2 + i as u32))
        .ok_or_else(|| Error::Input(format!("unknown modality tag {tag:?}")))
}

impl Modality {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag.split_once("->") {
            Some((q, t)) => Ok(Modality {
                query: marker(q)?,
                target: marker(t)?,
            }),
            None => {
                let m = marker(tag)?;
                Ok(Modality {
                    query: m,
                    target: m,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ByteTokenizer {
    pub max_seq_len: usize,
}

impl ByteTokenizer {
    pub fn new(max_seq_len: usize) -> Self {
        ByteTokenizer { max_seq_len }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenize_with_marker(text, None)
    }

    /// Tokenizes `text`, optionally prefixed by a modality marker. Input longer
    /// than `max_seq_len` is truncated with a warning.
    pub fn tokenize_with_marker(&self, text: &str, marker: Option<u32>) -> Result<TokenSequence> {
        if text.is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        let mut ids: Vec<u32> = marker.into_iter().collect();
        ids.extend(text.bytes().map(|b| b as u32 + N_SPECIAL));
        if ids.len() > self.max_seq_len {
            log::warn!(
                "truncating input of {} tokens to {}",
                ids.len(),
                self.max_seq_len
            );
            ids.truncate(self.max_seq_len);
        }
        Ok(TokenSequence::from_ids_unchecked(ids))
    }

    /// Task-string prefix (`t` followed by the separator), or nothing.
    pub fn task_prefix(&self, task: Option<&str>) -> Vec<u32> {
        match task {
            Some(t) if !t.is_empty() => t
                .bytes()
                .map(|b| b as u32 + N_SPECIAL)
                .chain(std::iter::once(SEP))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// `t ⊕ q`: the task prefix followed by the query tokens. Overflowing
    /// `max_seq_len` is an input error rather than a silent truncation.
    pub fn compose(&self, task: Option<&str>, seq: &TokenSequence) -> Result<TokenSequence> {
        let mut ids = self.task_prefix(task);
        ids.extend_from_slice(seq.ids());
        if ids.len() > self.max_seq_len {
            return Err(Error::Input(format!(
                "task string plus sequence is {} tokens, limit {}",
                ids.len(),
                self.max_seq_len
            )));
        }
        Ok(TokenSequence::from_ids_unchecked(ids))
    }
}

/// Inverse of the byte mapping; special tokens are skipped.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| (N_SPECIAL..N_SPECIAL + 256).contains(&id))
        .map(|&id| (id - N_SPECIAL) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
