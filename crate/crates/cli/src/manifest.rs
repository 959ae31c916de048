//! Run manifests: a reproducibility record written atomically at the
//! end of every command.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyboard_core::error::Result;
use storyboard_core::BackendConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestOutput {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run on the toy backend: the merged
/// config, all seeds, input digests, and output digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BackendConfig,
    pub seeds: BTreeMap<String, u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<ManifestOutput>,
    pub wall_ms: u128,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl RunManifest {
    /// Writes `manifest.json` into `dir` via a temp file and rename, so
    /// a manifest is either absent or complete.
    pub fn write_atomic(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        let target = dir.join("manifest.json");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, &target)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}
