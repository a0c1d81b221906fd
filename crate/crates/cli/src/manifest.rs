//! Run manifests: what was run, with which settings, on which inputs, and
//! which files it produced.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Merged file and flag settings; also written as `config.toml`.
    pub config: serde_json::Value,
    /// Settings after defaults were applied.
    pub effective: serde_json::Value,
    pub seeds: Vec<u64>,
    /// SHA-256 over the resolved settings and the bytes of every input file.
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub output_dir: String,
    /// Files written by the command, relative to `output_dir`.
    pub outputs: Vec<String>,
}

/// Collects outputs while a command runs and writes the manifest at the end.
pub struct Recorder {
    pub dir: PathBuf,
    command: String,
    config_path: Option<PathBuf>,
    table: toml::Table,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Recorder {
    pub fn new(command: &str, dir: PathBuf, config_path: Option<&Path>, table: toml::Table) -> Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut rec = Self {
            dir,
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            table,
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let text = toml::to_string(&rec.table)?;
        rec.write("config.toml", text.as_bytes())?;
        Ok(rec)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file already written under the output directory.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn input_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        let config = toml::to_string(&self.table)?;
        h.update(format!("config {}\0", config.len()));
        h.update(config.as_bytes());
        for path in &self.inputs {
            let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
            h.update(format!("blob {}\0", bytes.len()));
            h.update(&bytes);
        }
        Ok(hex(&h.finalize()))
    }

    /// Writes `manifest.json` after checking that every recorded output exists.
    pub fn finish(self, effective: serde_json::Value, seeds: Vec<u64>) -> Result<RunManifest> {
        for name in &self.outputs {
            if !self.path(name).is_file() {
                bail!("output {name} is missing from {}", self.dir.display());
            }
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            config: serde_json::to_value(&self.table)?,
            effective,
            seeds,
            input_hash: self.input_hash()?,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            output_dir: self.dir.display().to_string(),
            outputs: self.outputs.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.path("manifest.json"), text)?;
        Ok(manifest)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the little-endian bytes of a parameter vector.
pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex(&h.finalize())
}
