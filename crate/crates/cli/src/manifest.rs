//! Run manifest, artifact hashing and the output-directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub complete: bool,
    /// Path relative to the run root → hex SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    /// Loads `root/manifest.json`, or starts an empty manifest.
    pub fn open(root: &Path, config_hash: &str) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self {
                config_hash: config_hash.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                stages: BTreeMap::new(),
            });
        }
        let m: Self = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Failure::Artifact(format!("unreadable manifest {}: {e}", path.display())))?;
        if m.config_hash != config_hash {
            return Err(Failure::Artifact(format!(
                "{} belongs to config {}, not {config_hash}",
                path.display(),
                m.config_hash
            ))
            .into());
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.stages.get(stage).is_some_and(|s| s.complete)
    }

    /// Checks every recorded artifact of `stage` against its hash.
    pub fn verify(&self, root: &Path, stage: &str) -> Result<()> {
        let Some(rec) = self.stages.get(stage) else { return Ok(()) };
        for (rel, want) in &rec.artifacts {
            let path = root.join(rel);
            if !path.exists() {
                return Err(Failure::Artifact(format!("missing artifact {}", path.display())).into());
            }
            if &file_hash(&path)? != want {
                return Err(Failure::Artifact(format!(
                    "artifact {} does not match its recorded hash (modified since stage {stage} ran)",
                    path.display()
                ))
                .into());
            }
        }
        Ok(())
    }

    pub fn record(&mut self, root: &Path, stage: &str, artifacts: &[String]) -> Result<()> {
        let mut map = BTreeMap::new();
        for rel in artifacts {
            map.insert(rel.clone(), file_hash(&root.join(rel))?);
        }
        self.stages.insert(stage.to_string(), StageRecord { complete: true, artifacts: map });
        Ok(())
    }

    pub fn invalidate(&mut self, stage: &str) {
        self.stages.remove(stage);
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct Lock(PathBuf);

impl Lock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => anyhow::bail!(
                "{} is locked by another run; delete {} if no run is active",
                root.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("a.txt"), "one").unwrap();
        let mut m = RunManifest::open(root, "h").unwrap();
        m.record(root, "s", &["a.txt".to_string()]).unwrap();
        m.save(root).unwrap();
        let m = RunManifest::open(root, "h").unwrap();
        assert!(m.is_complete("s"));
        m.verify(root, "s").unwrap();
        fs::write(root.join("a.txt"), "two").unwrap();
        assert!(m.verify(root, "s").is_err());
        assert!(RunManifest::open(root, "other").is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = Lock::acquire(dir.path()).unwrap();
        assert!(Lock::acquire(dir.path()).is_err());
        drop(a);
        Lock::acquire(dir.path()).unwrap();
    }
}
