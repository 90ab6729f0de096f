//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "GEMB2CKP"
//! version    u32 LE    1
//! header_len u64 LE
//! header     UTF-8 JSON {"config": EncoderConfig, "tensors": [{name, shape, offset}], "payload_bytes"}
//! payload    f32 LE values, tensors in manifest order, offsets relative to payload start
//! digest     32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GEMB2CKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<ManifestEntry>,
    payload_bytes: u64,
}

/// Parameters plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl From<Encoder> for Checkpoint {
    fn from(e: Encoder) -> Self {
        Checkpoint {
            config: e.config,
            params: e.params,
        }
    }
}

impl Checkpoint {
    pub fn into_encoder(self) -> Result<Encoder> {
        Encoder::new(self.config, self.params)
    }

    /// Values as they will read back after a save/load round trip.
    pub fn narrowed(&self) -> Checkpoint {
        let mut out = self.clone();
        for (_, t) in out.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.config)?;
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors,
            payload_bytes: offset,
        })
        .map_err(|e| Error::Input(format!("serializing checkpoint header: {e}")))?;

        let mut out = Vec::with_capacity(20 + header.len() + offset as usize + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, detail: String| Error::parse(path, format!("byte {offset}"), detail);
        if bytes.len() < 20 + DIGEST_LEN {
            return Err(err(0, format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err(0, "bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err(8, format!("unsupported version {version}")));
        }
        let body_len = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body_len])[..] != bytes[body_len..] {
            return Err(err(body_len, "checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body_len)
            .ok_or_else(|| err(12, format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| err(20, format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| err(20, format!("header config: {e}")))?;
        let payload = &bytes[header_end..body_len];
        if payload.len() as u64 != header.payload_bytes {
            return Err(err(
                header_end,
                format!("payload is {} bytes, header says {}", payload.len(), header.payload_bytes),
            ));
        }

        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(err(
                    20,
                    format!("tensor {} at offset {}, expected {expected_offset}", entry.name, entry.offset),
                ));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(err(header_end + start, format!("tensor {} overruns payload", entry.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| err(20, format!("tensor {}: {e}", entry.name)))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(err(20, format!("duplicate tensor {}", entry.name)));
            }
            expected_offset = end as u64;
        }
        if expected_offset != header.payload_bytes {
            return Err(err(header_end, "manifest does not cover payload".into()));
        }
        let params = EncoderParams::from_map(tensors);
        params
            .check(&header.config)
            .map_err(|e| err(20, format!("manifest: {e}")))?;
        Ok(Checkpoint {
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
