//! Run directories and their manifests.
//!
//! A run directory only ever gains files. Each command holds a lock file for
//! the duration of its writes and finishes by writing a manifest that lists
//! every input and output with its SHA-256.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::io::{file_sha256, sha256_hex, write_atomic};

pub const LOCK_FILE: &str = ".pcn.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory → sha256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub software_version: String,
}

impl RunManifest {
    /// Copy with timestamps zeroed, for comparing reruns.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_unix: 0,
            finished_unix: 0,
            ..self.clone()
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Exclusive, append-only access to a run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates a new run directory; an existing non-empty directory is refused.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        if root.exists() && fs::read_dir(root)?.next().is_some() {
            return Err(PcnError::Config(format!(
                "output directory {} is not empty; run directories are never overwritten",
                root.display()
            )));
        }
        fs::create_dir_all(root)?;
        Self::lock(root, command)
    }

    /// Opens an existing run directory to add files to it.
    pub fn open(root: &Path, command: &str) -> Result<Self> {
        if !root.is_dir() {
            return Err(PcnError::Prerequisite(format!("run directory {} does not exist", root.display())));
        }
        Self::lock(root, command)
    }

    fn lock(root: &Path, command: &str) -> Result<Self> {
        let lock = root.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => PcnError::Locked(root.to_path_buf()),
                _ => PcnError::Io(e),
            })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config: serde_json::Value::Null,
                config_hash: String::new(),
                seeds: Vec::new(),
                deterministic: true,
                started_unix: unix_now(),
                finished_unix: 0,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                warnings: Vec::new(),
                software_version: env!("CARGO_PKG_VERSION").into(),
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn set_config<T: Serialize>(&mut self, cfg: &T, seeds: Vec<u64>, deterministic: bool) -> Result<()> {
        let v = serde_json::to_value(cfg)?;
        self.manifest.config_hash = sha256_hex(serde_json::to_string(&v)?.as_bytes());
        self.manifest.config = v;
        self.manifest.seeds = seeds;
        self.manifest.deterministic = deterministic;
        Ok(())
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.manifest.warnings.push(msg.into());
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sha = file_sha256(path)?;
        self.manifest.inputs.insert(path.display().to_string(), sha);
        Ok(())
    }

    pub fn add_input_digest(&mut self, name: &str, sha: String) {
        self.manifest.inputs.insert(name.into(), sha);
    }

    /// Writes a new file below the run directory and records its checksum.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if p.exists() {
            return Err(PcnError::Config(format!("{} already exists; refusing to overwrite", p.display())));
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&p, bytes)?;
        self.manifest.outputs.insert(rel.into(), sha256_hex(bytes));
        Ok(p)
    }

    /// Records a file some other writer placed below the run directory.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(&self.root)
            .map_err(|_| PcnError::Config(format!("{} is outside the run directory", path.display())))?;
        self.manifest
            .outputs
            .insert(rel.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Writes the manifest under `name` and releases the lock.
    pub fn finish(mut self, name: &str) -> Result<RunManifest> {
        self.manifest.finished_unix = unix_now();
        let body = serde_json::to_string_pretty(&self.manifest)?;
        let p = self.root.join(name);
        if p.exists() {
            return Err(PcnError::Config(format!("{} already exists; refusing to overwrite", p.display())));
        }
        write_atomic(&p, body.as_bytes())?;
        Ok(self.manifest.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    if !path.exists() {
        return Err(PcnError::Prerequisite(format!("manifest {} not found", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_and_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut r = RunDir::create(&root, "test").unwrap();
        assert!(matches!(RunDir::open(&root, "other"), Err(PcnError::Locked(_))));
        r.write("a.txt", b"hello").unwrap();
        assert!(r.write("a.txt", b"again").is_err());
        r.set_config(&serde_json::json!({"k": 1}), vec![3], true).unwrap();
        let m = r.finish("manifest.json").unwrap();
        assert_eq!(m.outputs["a.txt"], sha256_hex(b"hello"));
        assert!(!root.join(LOCK_FILE).exists());
        assert!(RunDir::create(&root, "test").is_err());
        let back = read_manifest(&root.join("manifest.json")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.without_timestamps().started_unix, 0);
        let r2 = RunDir::open(&root, "eval").unwrap();
        assert!(r2.finish("manifest.json").is_err());
    }

    #[test]
    fn missing_manifest_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(&dir.path().join("m.json")), Err(PcnError::Prerequisite(_))));
        assert!(matches!(RunDir::open(&dir.path().join("nope"), "x"), Err(PcnError::Prerequisite(_))));
    }
}
