//! Run directories, run manifests and file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sma_core::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.txt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "checkpoint.smac";
pub const METRICS_FILE: &str = "metrics.csv";

/// Git-style blob hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(blob_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// `<mode>-<hash8>-s<seed>`, where the hash covers everything but the seed.
pub fn run_name(cfg: &RunConfig) -> String {
    let hash = blob_hash(cfg.echo_without_seed().as_bytes());
    format!("{}-{}-s{}", cfg.train.shuffle_mode.name(), &hash[..8], cfg.train.seed)
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Ordered `key = value` record of what a run did and produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Adds output files (relative to the run directory) to the `outputs` list.
    pub fn add_outputs(&mut self, files: &[String]) {
        let mut all: Vec<String> = self
            .get("outputs")
            .map(|v| v.split(';').filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        for f in files {
            if !all.contains(f) {
                all.push(f.clone());
            }
        }
        self.set("outputs", all.join(";"));
    }

    pub fn outputs(&self) -> Vec<String> {
        self.get("outputs")
            .map(|v| v.split(';').filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = RunManifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("{}: bad line `{line}`", path.display())))?;
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    /// Reads the manifest in `dir`, or starts an empty one.
    pub fn read_or_default(dir: &Path) -> Result<Self> {
        if dir.join(MANIFEST_FILE).exists() {
            Self::read(dir)
        } else {
            Ok(RunManifest::default())
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    /// Every listed output that is missing from `dir`.
    pub fn missing_outputs(&self, dir: &Path) -> Vec<PathBuf> {
        self.outputs()
            .into_iter()
            .map(|f| dir.join(f))
            .filter(|p| !p.exists())
            .collect()
    }
}
