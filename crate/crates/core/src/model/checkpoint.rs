//! Binary model container shared by every model kind.
//!
//! Layout: the 8-byte magic `DAGICKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the
//! tensor payload as little-endian `f64`s in header order. The header
//! carries the model kind tag, the schema fingerprint, kind-specific
//! metadata, the tensor table, and a SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{hex, write_atomic};
use crate::error::{Error, Result};
use crate::math::Matrix;

pub const MAGIC: &[u8; 8] = b"DAGICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: Option<String>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(
        kind: &str,
        fingerprint: String,
        meta: &impl Serialize,
        tensors: Vec<(String, Matrix)>,
    ) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            fingerprint,
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            fingerprint: Some(self.fingerprint.clone()),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(
                "not a model checkpoint (bad magic)".into(),
            ));
        }
        let version =
            u32::from_le_bytes(bytes.get(8..12).ok_or_else(truncated)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes.get(12..20).ok_or_else(truncated)?.try_into().unwrap());
        let header_end = 20usize
            .checked_add(usize::try_from(len).map_err(|_| truncated())?)
            .ok_or_else(truncated)?;
        let header: Header =
            serde_json::from_slice(bytes.get(20..header_end).ok_or_else(truncated)?)?;
        let fingerprint = header
            .fingerprint
            .filter(|f| !f.is_empty())
            .ok_or_else(|| Error::Checkpoint("schema fingerprint is missing".into()))?;
        let payload = &bytes[header_end..];
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if payload.len() < expected {
            return Err(truncated());
        }
        if payload.len() > expected {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Checkpoint("payload checksum mismatch".into()));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let data = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)?));
        }
        Ok(Self {
            kind: header.kind,
            fingerprint,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} model, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}
