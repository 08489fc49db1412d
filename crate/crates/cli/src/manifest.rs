//! Run manifests: resolved config, input/output hashes and headline results.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use lamo_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DETERMINISTIC_ENV: &str = "LAMO_DETERMINISTIC";

/// True when `LAMO_DETERMINISTIC` is set to anything but `0` or empty.
pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let data = std::fs::read(path)?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&data)),
        bytes: data.len() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub results: serde_json::Value,
    /// Omitted in deterministic mode so manifests compare byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        Ok(ManifestBuilder {
            manifest: RunManifest {
                tool: "lamo".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                seed,
                config: serde_json::to_value(config)?,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                results: serde_json::Value::Null,
                created_unix: None,
                wall_seconds: None,
            },
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(key.into(), digest(path)?);
        Ok(())
    }

    /// Records an output file by its path relative to the run directory.
    pub fn output(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let mut d = digest(&dir.join(rel))?;
        d.path = rel.to_string();
        self.manifest.outputs.insert(rel.into(), d);
        Ok(())
    }

    pub fn results(&mut self, results: serde_json::Value) {
        self.manifest.results = results;
    }

    /// Writes `manifest.json`. Called once before training with the config
    /// and inputs, and again at the end with outputs and results.
    pub fn write(&mut self, dir: &Path) -> Result<RunManifest> {
        if !deterministic() {
            self.manifest.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
            self.manifest.wall_seconds = Some(self.started.elapsed().as_secs_f64());
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(self.manifest.clone())
    }
}
