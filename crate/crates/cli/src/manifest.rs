//! Run manifests: provenance sidecars written next to every primary
//! output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vicd_core::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Excluded from the digest so re-runs stay byte-identical.
    pub wall_clock_ms: u128,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_digest,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_ms: 0,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Digest over the deterministic fields (everything but wall clock).
    pub fn digest(&self) -> String {
        let key = format!(
            "{}|{}|{:?}|{:?}|{:?}|{}",
            self.command, self.config_digest, self.seeds, self.inputs, self.outputs,
            self.tool_version
        );
        vicd_core::graph::digest_bytes(key.as_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).map_err(vicd_core::Error::from)?;
        json.push('\n');
        atomic_write(path, json.as_bytes())
    }
}

/// Sidecar path for a primary output file.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".manifest.json");
    primary.with_file_name(name)
}

/// Write via a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
