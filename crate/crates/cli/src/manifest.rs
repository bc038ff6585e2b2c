use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Provenance of one output directory: what ran, on which inputs, and the
/// digest of every file it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub config_path: Option<String>,
    /// SHA-256 of the effective configuration (`config.toml`).
    pub config_hash: String,
    pub seed: u64,
    /// Content hash of the dataset the command read or wrote.
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub output_dir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: BTreeMap<String, String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl RunManifest {
    /// Hashes every listed output file (relative to `dir`) and writes the
    /// manifest next to them.
    pub fn finish(mut self, dir: &Path, files: &[String]) -> anyhow::Result<Self> {
        for f in files {
            self.outputs.insert(f.clone(), file_hash(&dir.join(f))?);
        }
        self.finished_unix = now_unix();
        std::fs::write(dir.join(RUN_MANIFEST), serde_json::to_vec_pretty(&self)?)?;
        Ok(self)
    }
}
