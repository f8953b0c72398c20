//! Run manifest: which stages finished for which configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Paths relative to the run directory.
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub fingerprint: String,
    /// Checksum of the trained target network; later stages refuse a changed network.
    pub target_checksum: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(fingerprint: &str) -> Self {
        RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: fingerprint.to_string(),
            target_checksum: None,
            stages: BTreeMap::new(),
        }
    }

    /// Loads `dir/manifest.json`, or `None` when there is none yet.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(CliError::file(&path))?;
        let m: RunManifest = serde_json::from_slice(&bytes).map_err(CliError::json(&path))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported manifest format version {}",
                path.display(),
                m.format_version
            )));
        }
        Ok(Some(m))
    }

    /// Writes through a temporary file so an interrupted run never leaves a torn manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let bytes = serde_json::to_vec_pretty(self).map_err(CliError::json(&path))?;
        std::fs::write(&tmp, bytes).map_err(CliError::file(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(CliError::file(&path))
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }
}
