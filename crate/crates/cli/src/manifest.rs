use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use vqa_fusion::data::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `path` (or `path` itself), sorted, skipping
/// manifests.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))?;
    for entry in entries {
        let p = entry
            .with_context(|| format!("listing {}", path.display()))?
            .path();
        if p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn hash_paths(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for root in paths {
        for f in files_under(root)? {
            out.insert(f.display().to_string(), hash_file(&f)?);
        }
    }
    Ok(out)
}

impl Manifest {
    pub fn new(seed: Option<u64>, config: &impl Serialize, inputs: &[PathBuf]) -> Result<Self> {
        let canonical = serde_json::to_vec(&serde_json::to_value(config)?)?;
        Ok(Self {
            command: std::env::args().collect(),
            seed,
            config_hash: sha256_hex(&canonical),
            inputs: hash_paths(inputs)?,
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    /// Hashes the outputs and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        self.outputs = hash_paths(outputs)?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
