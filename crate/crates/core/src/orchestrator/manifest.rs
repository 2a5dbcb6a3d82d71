//! Run manifests and content digests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::GatewayMode;

use super::OrchestratorError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String, OrchestratorError> {
    let bytes = std::fs::read(path).map_err(|e| OrchestratorError::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

/// A file and its sha256. Paths are relative to the run directory, or to
/// the config file for inputs outside it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Digest over the stage's inputs; equal keys mean equal outputs.
    pub key: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub toolkit_version: String,
    pub gateway_mode: GatewayMode,
    /// Present for replay runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_digest: Option<String>,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    /// Set only on a partial manifest left by a failed run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<StageFailure>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, OrchestratorError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| OrchestratorError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt(format!("{}: {e}", path.display())))
    }

    pub fn store(&self, run_dir: &Path) -> Result<(), OrchestratorError> {
        let path = run_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| OrchestratorError::io(&path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Every output of every stage, in stage order.
    pub fn outputs(&self) -> impl Iterator<Item = &FileDigest> {
        self.stages.iter().flat_map(|s| s.outputs.iter())
    }

    /// Checks that each referenced output exists with the recorded digest.
    pub fn verify(&self, run_dir: &Path) -> Result<(), OrchestratorError> {
        for f in self.outputs() {
            let actual = digest_file(&run_dir.join(&f.path))?;
            if actual != f.sha256 {
                return Err(OrchestratorError::Corrupt(format!("{} digest mismatch", f.path)));
            }
        }
        Ok(())
    }
}
