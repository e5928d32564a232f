use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance record written next to a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    pub params: BTreeMap<String, String>,
    /// Relative path to sha256 of every output file.
    pub outputs: BTreeMap<String, String>,
    pub outputs_hash: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: Option<(String, serde_json::Value)>,
    params: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: None,
            params: BTreeMap::new(),
        }
    }

    pub fn config(mut self, hash: String, value: serde_json::Value) -> Self {
        self.config = Some((hash, value));
        self
    }

    pub fn param(mut self, k: &str, v: impl ToString) -> Self {
        self.params.insert(k.to_string(), v.to_string());
        self
    }

    /// Hashes every file under `out` (logs excluded) and writes manifest.json.
    pub fn write(self, out: &Path) -> Result<Manifest> {
        let mut files = Vec::new();
        walk(out, &mut files)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let rel = f
                .strip_prefix(out)
                .expect("under out")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "manifest.json" || rel.ends_with(".log") {
                continue;
            }
            outputs.insert(rel, sha256_file(&f)?);
        }
        let mut h = Sha256::new();
        for (k, v) in &outputs {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let (config_hash, config) = match self.config {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let m = Manifest {
            command: self.command,
            seed: self.seed,
            config_hash,
            config,
            params: self.params,
            outputs,
            outputs_hash: hex::encode(h.finalize()),
        };
        std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}
