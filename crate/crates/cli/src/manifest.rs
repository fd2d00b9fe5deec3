use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the
/// content.
pub fn git_blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub param_counts: BTreeMap<String, usize>,
    pub outputs: Vec<PathBuf>,
    pub checkpoint_sha256: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            seed,
            started_at: Utc::now(),
            finished_at: None,
            param_counts: BTreeMap::new(),
            outputs: Vec::new(),
            checkpoint_sha256: BTreeMap::new(),
        }
    }

    /// Records an output written under `dir` (stored relative to it).
    pub fn output(&mut self, dir: &Path, path: &Path) {
        self.outputs
            .push(path.strip_prefix(dir).unwrap_or(path).to_path_buf());
    }

    pub fn checkpoint(&mut self, dir: &Path, path: &Path, bytes: &[u8]) {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.checkpoint_sha256
            .insert(rel.display().to_string(), git_blob_sha256(bytes));
        self.output(dir, path);
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = Some(Utc::now());
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
