//! Run manifest: what a finished run produced and under which config.

use std::path::Path;

use prunebench::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArtifactPaths {
    pub config: String,
    pub report: String,
    pub cells_dir: String,
    pub checkpoints_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    /// FNV-1a hash of the canonical config text.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: ArtifactPaths,
    /// Cells that failed, if any.
    pub failures: Vec<String>,
}

/// FNV-1a, stable across platforms and runs.
pub fn fnv1a_hex(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{:016x}", h)
}

impl RunManifest {
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialize error: {}", e)))?;
        std::fs::write(out_dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(out_dir: &Path) -> Result<RunManifest> {
        let path = out_dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Err(Error::Contract(format!(
                "no manifest at {}; run the experiment first",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {}", e)))
    }

    /// Every referenced artifact exists under `out_dir`.
    pub fn artifacts_present(&self, out_dir: &Path) -> bool {
        [
            self.artifacts.config.as_str(),
            self.artifacts.report.as_str(),
            self.artifacts.cells_dir.as_str(),
        ]
        .iter()
        .all(|p| out_dir.join(p).exists())
    }
}
