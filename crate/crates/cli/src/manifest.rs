use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use joadaa_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written to the output directory before
/// any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Artifact role to path.
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Content digests of inputs and outputs, filled in as they become known.
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            seed,
            artifacts: BTreeMap::new(),
            digests: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn artifact(mut self, role: &str, path: impl Into<PathBuf>) -> Self {
        self.artifacts.insert(role.to_string(), path.into());
        self
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        create_dir(out)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write(&out.join(MANIFEST_FILE), text.as_bytes())
    }
}

/// SHA-256 over every file under `root` except a top-level manifest, visited
/// in sorted relative-path order, hashing each path followed by the file
/// contents.
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.retain(|f| f != MANIFEST_FILE);
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        let bytes =
            fs::read(root.join(&rel)).map_err(|source| io_error(root.join(&rel), source))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex(&hasher.finalize()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| io_error(path, source))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|source| io_error(dir, source))?;
    for entry in entries {
        let entry = entry.map_err(|source| io_error(dir, source))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked from root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn io_error(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| io_error(path, source))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| io_error(path, source))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| io_error(path, source))
}
