use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;
use crate::io::{sha256_file, write_json};

/// Stage seed: the first 8 bytes of `sha256(master seed LE || stage name)`.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Record of one stage run. No timestamps, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub stage_seed: u64,
    /// file name -> sha256
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub params: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, params: serde_json::Value) -> Self {
        Manifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            stage_seed: stage_seed(seed, stage),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            params,
        }
    }

    fn key(path: &Path) -> String {
        path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(Self::key(path), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.insert(Self::key(path), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        write_json(&out_dir.join(format!("manifest_{}.json", self.stage)), self)
    }
}
