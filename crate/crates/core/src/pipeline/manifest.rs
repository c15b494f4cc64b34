use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::hex_digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to each stage's artifacts. Contains no
/// timestamps or absolute paths, so identical runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn hash_file(root: &Path, rel: &str) -> Result<FileHash> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileHash {
        path: rel.to_string(),
        sha256: hex_digest(&Sha256::digest(&bytes)),
    })
}

impl Manifest {
    pub fn record(
        root: &Path,
        stage: &str,
        fingerprint: &str,
        seed: u64,
        inputs: &[String],
        outputs: &[String],
    ) -> Result<Manifest> {
        let m = Manifest {
            stage: stage.to_string(),
            config_fingerprint: fingerprint.to_string(),
            seed,
            inputs: inputs.iter().map(|p| hash_file(root, p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| hash_file(root, p)).collect::<Result<_>>()?,
        };
        jsonl::write_json(&root.join(stage).join("manifest.json"), &m)?;
        Ok(m)
    }

    pub fn read(root: &Path, stage: &str) -> Result<Manifest> {
        jsonl::read_json(&root.join(stage).join("manifest.json"))
    }
}
