use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionResult, GatewayError, SamplingParams};

/// Recorded model responses keyed by request fingerprint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cassette {
    entries: BTreeMap<String, CompletionResult>,
}

/// One cassette line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub result: CompletionResult,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    model_id: &'a str,
    prompt: &'a str,
    params: &'a SamplingParams,
    sample_index: u32,
}

/// SHA-256 (hex) of the canonical JSON encoding of the request identity.
pub fn fingerprint(model_id: &str, prompt: &str, params: &SamplingParams, sample_index: u32) -> String {
    let input = FingerprintInput {
        model_id,
        prompt,
        params,
        sample_index,
    };
    let bytes = serde_json::to_vec(&input).expect("fingerprint input serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let err = |message: String| GatewayError::Cassette {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            entries.insert(entry.fingerprint, entry.result);
        }
        Ok(Cassette { entries })
    }

    /// Writes all entries sorted by fingerprint.
    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let mut out = String::new();
        for (fp, result) in &self.entries {
            out.push_str(&entry_line(fp, result));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| GatewayError::Cassette {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn get(&self, fingerprint: &str) -> Option<&CompletionResult> {
        self.entries.get(fingerprint)
    }

    pub fn insert(&mut self, fingerprint: String, result: CompletionResult) {
        self.entries.insert(fingerprint, result);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &CompletionResult)> {
        self.entries.iter()
    }
}

fn entry_line(fp: &str, result: &CompletionResult) -> String {
    let entry = CassetteEntry {
        fingerprint: fp.to_string(),
        result: result.clone(),
    };
    serde_json::to_string(&entry).expect("cassette entry serializes")
}

pub(super) fn append(path: &Path, fp: &str, result: &CompletionResult) -> Result<(), GatewayError> {
    let err = |e: std::io::Error| GatewayError::Cassette {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(err)?;
    writeln!(file, "{}", entry_line(fp, result)).map_err(err)?;
    file.flush().map_err(err)
}
