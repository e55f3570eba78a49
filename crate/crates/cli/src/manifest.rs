//! Append-only run manifests.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path, display: String) -> Result<Self, CliError> {
        let body = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self::from_bytes(display, &body))
    }

    pub fn from_bytes(path: String, body: &[u8]) -> Self {
        Self {
            path,
            sha256: sha256_hex(body),
            bytes: body.len() as u64,
        }
    }
}

pub fn sha256_hex(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, enough to replay the run.
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    /// Paths are relative to the output directory.
    pub outputs: Vec<Artifact>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn append(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = out.join(MANIFEST_FILE);
        let mut line = serde_json::to_string(self).expect("manifest serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
        f.write_all(line.as_bytes())
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn read_manifests(out: &Path) -> Result<Vec<RunManifest>, CliError> {
    let path = out.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
