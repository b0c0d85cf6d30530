//! Run manifests: what a command read, resolved and wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments as given, enough to replay the run.
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    /// Defaults, then the config file, then flags.
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            args,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: &Path, bytes: &[u8]) {
        self.outputs.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}
