//! Run manifests written next to every output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// File name to git-style content hash.
    pub weights: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            weights: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    pub fn weight_file(&mut self, path: &Path) -> Result<&mut Self> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.weights.insert(name, hash_file(path)?);
        Ok(self)
    }

    /// Records an output that already exists on disk.
    pub fn output(&mut self, key: &str, path: &Path) -> Result<&mut Self> {
        self.output_hashes.insert(key.to_string(), hash_file(path)?);
        self.outputs.insert(key.to_string(), path.to_path_buf());
        Ok(self)
    }

    /// Records a timing log; its contents vary between runs, so it is not hashed.
    pub fn log(&mut self, key: &str, path: &Path) -> &mut Self {
        self.outputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        editctrl::io::write_atomic(path, json.as_bytes())?;
        Ok(())
    }
}

/// `sha256("blob <len>\0" ‖ bytes)`, the object id git computes in SHA-256 mode.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(git_hash(&bytes))
}

/// `out.etf` → `out.etf.manifest.json`; directories get `manifest.json` inside.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
