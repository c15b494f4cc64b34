//! Checkpoint container: one JSON header line, then the raw little-endian
//! `f64` parameter buffer in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{hex, Layout, Parameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "opendec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub steps: usize,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the payload bytes.
    pub payload_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Parameters,
    pub steps: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: Vec<u8> = self.params.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            seed: self.params.config.seed,
            steps: self.steps,
            dtype: "f64le".into(),
            tensors: self
                .params
                .layout
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset: t.offset,
                })
                .collect(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        if header.dtype != "f64le" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}`", header.dtype)));
        }
        header.config.validate()?;
        let payload = &bytes[nl + 1..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Checkpoint("payload checksum mismatch".into()));
        }
        let layout = Layout::new(&header.config);
        if payload.len() != layout.total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, layout needs {}",
                payload.len(),
                layout.total * 8
            )));
        }
        let expected: Vec<(&str, &[usize], usize)> =
            layout.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.offset)).collect();
        let found: Vec<(&str, &[usize], usize)> =
            header.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.offset)).collect();
        if expected != found {
            return Err(Error::Checkpoint("tensor table does not match the configured layout".into()));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Checkpoint {
            params: Parameters {
                config: header.config,
                layout,
                data,
            },
            steps: header.steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
