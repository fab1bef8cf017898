// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Stage;
use crate::backend::BackendDescriptor;
use crate::digest::{file_sha256, write_atomic};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum StageStatus {
    Completed,
    Failed { error: String },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    #[serde(flatten)]
    pub status: StageStatus,
    /// Digest of everything the stage read: settings, corpus, backend and
    /// upstream outputs.
    pub input_digest: String,
    /// Run-relative output path → SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// True when the outputs of an earlier identical run were kept.
    #[serde(default)]
    pub reused: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl StageRecord {
    pub fn is_completed(&self) -> bool {
        self.status == StageStatus::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_snapshot: String,
    pub corpus_digest: String,
    pub backend: Option<BackendDescriptor>,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Every file written by a stage, run-relative path → SHA-256.
    pub files: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(raw) => serde_json::from_str(&raw)
                .map(Some)
                .map_err(|e| Error::json(path.display().to_string(), e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let raw = serde_json::to_vec_pretty(self).map_err(|e| Error::json("run manifest", e))?;
        write_atomic(&run_dir.join(MANIFEST_FILE), &raw)
    }

    pub fn completed(&self) -> usize {
        self.stages.values().filter(|s| s.is_completed()).count()
    }
}

/// True if every recorded output still exists with its recorded digest.
pub fn outputs_intact(run_dir: &Path, outputs: &BTreeMap<String, String>) -> bool {
    outputs
        .iter()
        .all(|(rel, sha)| file_sha256(&run_dir.join(rel)).is_ok_and(|d| &d == sha))
}
