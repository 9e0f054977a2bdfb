// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-stage manifest: config fingerprint plus input and output hashes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NspuError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| NspuError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| NspuError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| NspuError::io(&path, e))
    }

    /// True when `stage` ran with `config_hash` on exactly these inputs and
    /// every recorded output is still on disk unchanged.
    pub fn is_current(
        &self,
        dir: &Path,
        stage: &str,
        config_hash: &str,
        inputs: &BTreeMap<String, String>,
    ) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.config_hash == config_hash
            && &rec.inputs == inputs
            && rec
                .outputs
                .iter()
                .all(|(p, h)| hash_file(&dir.join(p)).is_ok_and(|cur| &cur == h))
    }

    /// Re-hashes every recorded output; returns the paths that differ.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for rec in self.stages.values() {
            for (p, h) in &rec.outputs {
                if !hash_file(&dir.join(p)).is_ok_and(|cur| &cur == h) {
                    bad.push(p.clone());
                }
            }
        }
        bad
    }
}
