//! Artifact writing and the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// No timestamp and no worker count, so the manifest itself replays byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub cli_version: String,
    pub core_version: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub outputs: Vec<ManifestEntry>,
}

/// Output directory that remembers what was written into it.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    written: Vec<ManifestEntry>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.retain(|e| e.file != name);
        self.written.push(ManifestEntry { file: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
        let mut text = format!("{header}\n");
        for r in rows {
            text.push_str(&r);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    pub fn finish(mut self, command: &str, config: Option<&[u8]>, seed: u64) -> Result<Vec<String>> {
        self.written.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = Manifest {
            command: command.to_string(),
            cli_version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: lockin_core::VERSION.to_string(),
            config_sha256: config.map(sha256_hex),
            seed,
            outputs: self.written.clone(),
        };
        let files = self.written.iter().map(|e| e.file.clone()).collect();
        self.json("manifest.json", &manifest)?;
        Ok(files)
    }
}
