//! Checkpoint files: a TOML header followed by raw little-endian f32
//! tensors.
//!
//! Layout: one line `MSTNET-CKPT <version> <header bytes>`, the header,
//! then the payload. The header records the configuration, input shapes,
//! normalization statistics, a tensor directory and a SHA-256 checksum of
//! the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{InputDims, Mstnet, Normalizer};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "MSTNET-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    checksum: String,
    payload_bytes: usize,
    epoch: usize,
    config: ModelConfig,
    dims: InputDims,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to run it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Mstnet,
    pub params: ParamStore<f32>,
    pub normalizer: Normalizer,
    /// Epoch after which the parameters were captured.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len(),
                len: p.value.len(),
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let config = self.net.config.without_paths();
        let header = Header {
            config_hash: config.hash(),
            checksum: hex::encode(Sha256::digest(&payload)),
            payload_bytes: payload.len(),
            epoch: self.epoch,
            config,
            dims: self.net.dims.clone(),
            normalizer: self.normalizer.clone(),
            tensors,
        };
        let text = toml::to_string(&header).expect("header serializes");
        let mut out = format!("{MAGIC} {VERSION} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing preamble"))?;
        let preamble = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("preamble is not UTF-8"))?;
        let fields: Vec<&str> = preamble.split(' ').collect();
        if fields.len() != 3 || fields[0] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version: u32 = fields[1].parse().map_err(|_| bad("bad version"))?;
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let header_len: usize = fields[2].parse().map_err(|_| bad("bad header length"))?;
        let start = nl + 1;
        let end = start.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(&bytes[start..end]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::format("checkpoint header", e))?;
        let payload = &bytes[end..];
        if payload.len() != header.payload_bytes {
            return Err(bad(&format!("payload has {} bytes, header says {}", payload.len(), header.payload_bytes)));
        }
        let actual = hex::encode(Sha256::digest(payload));
        if actual != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                actual,
            });
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::Incompatible("config hash does not match the stored configuration".into()));
        }

        let (net, mut params) = Mstnet::build::<f32>(&header.config, &header.dims)?;
        if params.len() != header.tensors.len() {
            return Err(Error::Incompatible(format!(
                "configuration builds {} tensors, checkpoint holds {}",
                params.len(),
                header.tensors.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, entry) in ids.into_iter().zip(&header.tensors) {
            let p = params.get(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let bytes = payload
                .get(entry.offset..entry.offset + 4 * entry.len)
                .ok_or_else(|| bad(&format!("tensor `{}` lies outside the payload", entry.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *params.value_mut(id) = Tensor::new(entry.shape.clone(), data)?;
        }
        Ok(Self {
            net,
            params,
            normalizer: header.normalizer,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
