//! Single-file tensor checkpoints.
//!
//! Layout: the 8-byte magic `ACTLMCK1`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every tensor's values as little-endian
//! `f64` in header order. The header carries the module config, its SHA-256
//! hash, free-form extras, tensor names/shapes/offsets and a SHA-256 of the
//! payload.

use std::io::{Read, Write};
use std::path::Path;

use diffcore::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"ACTLMCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    kind: String,
    config_hash: String,
    config: Value,
    extra: Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub config_hash: String,
    pub extra: Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// SHA-256 of the compact JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, extra: Value, params: &ParamSet) -> Self {
        Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config_hash(config),
            extra,
            tensors: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format: FORMAT_VERSION,
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(head.len() as u64).to_le_bytes())?;
        out.write_all(&head)?;
        out.write_all(&payload)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let where_ = path.display().to_string();
        let bad = |m: &str| CoreError::Checkpoint(format!("{where_}: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format {}", header.format)));
        }
        let payload = &bytes[16 + hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(CoreError::Checksum(where_));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 8 * n)
                .ok_or_else(|| bad(&format!("tensor '{}' runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            config_hash: header.config_hash,
            extra: header.extra,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(CoreError::Checkpoint(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }

    /// A warning when `config` hashes differently from the stored config.
    pub fn config_warning<T: Serialize>(&self, config: &T) -> Option<String> {
        let h = config_hash(config);
        (h != self.config_hash).then(|| {
            format!(
                "{} checkpoint was written with a different configuration (hash {} vs {})",
                self.kind,
                &self.config_hash[..12],
                &h[..12]
            )
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor named in `params` from the checkpoint (with an
    /// optional name prefix). Missing names and shape mismatches are errors
    /// naming the tensor.
    pub fn load_into(&self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", params.name(id));
            let t = self
                .tensor(&name)
                .ok_or_else(|| CoreError::Checkpoint(format!("tensor '{name}' is missing")))?;
            let dst = params.get_mut(id);
            if t.shape() != dst.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }
}
