//! Run manifests: one JSON file per run recording the subcommand, the fully
//! resolved config, and a content hash over both. The hash deliberately
//! excludes the output directory and wall-clock duration so identical
//! configurations hash identically wherever and whenever they run.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    /// Hashes of input artifacts (datasets, checkpoints) keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub content_hash: String,
    pub output_dir: String,
    pub duration_seconds: f64,
}

pub fn content_hash(
    subcommand: &str,
    config: &serde_json::Value,
    inputs: &BTreeMap<String, String>,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(subcommand.as_bytes());
    hasher.update(b"\n");
    hasher.update(config.to_string().as_bytes());
    for (name, digest) in inputs {
        hasher.update(b"\n");
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(digest.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Digest of a single artifact file.
pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::from_io)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Digest of a directory's regular files, name-sorted so the result does not
/// depend on readdir order.
pub fn hash_dir(dir: &Path) -> Result<String, CliError> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(CliError::from_io)? {
        let entry = entry.map_err(CliError::from_io)?;
        if entry.path().is_file() {
            names.push(entry.path());
        }
    }
    names.sort();
    let mut hasher = Sha256::new();
    for path in names {
        hasher.update(path.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update(b"\n");
        hasher.update(std::fs::read(&path).map_err(CliError::from_io)?);
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Tracks one run from start to manifest write.
pub struct RunContext {
    subcommand: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl RunContext {
    pub fn new<C: Serialize>(subcommand: &str, config: &C) -> Result<Self, CliError> {
        let config = serde_json::to_value(config)
            .map_err(|e| CliError::Config(format!("serializing config: {e}")))?;
        Ok(Self {
            subcommand: subcommand.to_string(),
            config,
            inputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn record_input(&mut self, role: &str, digest: String) {
        self.inputs.insert(role.to_string(), digest);
    }

    pub fn hash(&self) -> String {
        content_hash(&self.subcommand, &self.config, &self.inputs)
    }

    /// Writes `manifest.json` into `dir` via a temp file and rename.
    pub fn write(self, dir: &Path) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            content_hash: self.hash(),
            subcommand: self.subcommand,
            config: self.config,
            inputs: self.inputs,
            output_dir: dir.display().to_string(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Config(format!("serializing manifest: {e}")))?;
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, text).map_err(CliError::from_io)?;
        std::fs::rename(&tmp, dir.join("manifest.json")).map_err(CliError::from_io)?;
        Ok(manifest)
    }
}
