use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use kgforge::{Error, Result};

use crate::config::RunConfig;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// Inputs and outputs of one command, hashed when the manifest is written.
pub struct Manifest {
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn start(command: &'static str) -> Self {
        Manifest {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.notes.insert(key.to_string(), value);
    }

    fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    }

    /// Writes `<out>/manifest.<command>.json` and returns its path.
    pub fn finish(self, cfg: &RunConfig) -> Result<PathBuf> {
        let doc = json!({
            "command": self.command,
            "kgforge_version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": cfg.snapshot,
            "inputs": Self::hashes(&self.inputs)?,
            "outputs": Self::hashes(&self.outputs)?,
            "notes": self.notes,
            "wall_clock_secs": self.started.elapsed().as_secs_f64(),
        });
        let path = cfg.out.join(format!("manifest.{}.json", self.command));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::data(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
