//! Run manifests: what a command produced, from which configuration.
//!
//! The manifest lists every file a run wrote, per stage, with wall times,
//! the tool version, and a SHA-256 of the canonical config JSON. It is
//! written atomically (temp file + rename) at the end of the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<PathBuf>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    /// The effective configuration after CLI overrides, echoed verbatim.
    pub effective_config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(command: &str, canonical_config_json: &str) -> RunManifest {
        let digest = Sha256::digest(canonical_config_json.as_bytes());
        let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        let effective_config = serde_json::from_str(canonical_config_json)
            .unwrap_or(serde_json::Value::Null);
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256,
            effective_config,
            stages: Vec::new(),
        }
    }

    /// Runs a stage, recording its wall time and the files it reports.
    pub fn stage<T>(
        &mut self,
        name: &str,
        body: impl FnOnce() -> Result<(T, Vec<PathBuf>)>,
    ) -> Result<T> {
        let started = Instant::now();
        let (value, outputs) = body()?;
        self.stages.push(StageRecord {
            name: name.to_string(),
            outputs,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        Ok(value)
    }

    /// Every output file the run recorded, in stage order.
    pub fn all_outputs(&self) -> Vec<&PathBuf> {
        self.stages.iter().flat_map(|s| s.outputs.iter()).collect()
    }

    /// Atomic write: serialize to `<path>.tmp`, then rename over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn hash_is_stable_and_hex() {
        let a = RunManifest::new("simulate", "{}");
        let b = RunManifest::new("simulate", "{}");
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
        let c = RunManifest::new("simulate", "{\"x\":1}");
        assert_ne!(a.config_sha256, c.config_sha256);
    }

    #[test]
    fn stages_accumulate_outputs() {
        let mut manifest = RunManifest::new("test", "{}");
        manifest
            .stage("one", || Ok(((), vec![PathBuf::from("a.csv")])))
            .unwrap();
        manifest
            .stage("two", || {
                Ok(((), vec![PathBuf::from("b.csv"), PathBuf::from("c.json")]))
            })
            .unwrap();
        assert_eq!(manifest.all_outputs().len(), 3);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let manifest = RunManifest::new("test", "{}");
        manifest.write_atomic(&path).unwrap();
        assert!(path.exists());
        assert!(!path.with_extension("json.tmp").exists());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("config_sha256"));
    }
}
