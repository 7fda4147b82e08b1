//! Run directories: one per invocation, holding the resolved configuration,
//! the command's artifacts and `outputs.json`, a list of every artifact with
//! its SHA-256.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::exit::{self, Failure};

pub const CONFIG_FILE: &str = "config.toml";
pub const OUTPUTS_FILE: &str = "outputs.json";
const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub command: String,
    pub version: String,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    artifacts: Vec<Artifact>,
    _lock: LockGuard,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl RunDir {
    /// Create (or reopen) a run directory and record the resolved config.
    /// A directory recording a different config, or one another process is
    /// writing, is refused.
    pub fn open(path: &Path, command: &str, config: &RunConfig) -> Result<Self, Failure> {
        fs::create_dir_all(path)?;
        let lock_path = path.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&lock_path).map_err(|e| {
            Failure::new(
                exit::RUN_DIR,
                format!("run directory {} is in use ({}: {e})", path.display(), lock_path.display()),
            )
        })?;
        let lock = LockGuard(lock_path);
        let text = format!("# lamina {command}\n{}", config.to_toml()?);
        let config_path = path.join(CONFIG_FILE);
        if config_path.is_file() {
            let existing = fs::read_to_string(&config_path)?;
            if existing != text {
                return Err(Failure::new(
                    exit::RUN_DIR,
                    format!("run directory {} holds a different run; choose another --run-dir", path.display()),
                ));
            }
        } else {
            write_atomic(&config_path, text.as_bytes())?;
        }
        Ok(RunDir { path: path.to_path_buf(), command: command.to_string(), artifacts: Vec::new(), _lock: lock })
    }

    /// Write `<stem>-<hash prefix>.<ext>` and record it.
    pub fn write_hashed(&mut self, stem: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let hash = sha256_hex(bytes);
        let rel = format!("{stem}-{}.{ext}", &hash[..12]);
        self.write_at(&rel, bytes)
    }

    /// Write a file at a fixed relative path and record it.
    pub fn write_at(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.path.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        self.record(rel)?;
        Ok(path)
    }

    /// Record a file some other code wrote inside the run directory.
    pub fn record(&mut self, rel: &str) -> Result<(), Failure> {
        let bytes = fs::read(self.path.join(rel))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.path).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    /// Write `outputs.json`. Called only when the command succeeded.
    pub fn finish(mut self) -> Result<Outputs, Failure> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let outputs =
            Outputs { command: self.command.clone(), version: env!("CARGO_PKG_VERSION").to_string(), artifacts: self.artifacts.clone() };
        write_atomic(&self.path.join(OUTPUTS_FILE), &serde_json::to_vec_pretty(&outputs)?)?;
        Ok(outputs)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("partial");
    {
        use std::io::Write;
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_names_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::open(dir.path(), "test", &RunConfig::default()).unwrap();
        let p = run.write_hashed("report", "json", b"{}").unwrap();
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        assert_eq!(name, format!("report-{}.json", &sha256_hex(b"{}")[..12]));
        let out = run.finish().unwrap();
        assert_eq!(out.artifacts.len(), 1);
        assert!(dir.path().join(OUTPUTS_FILE).is_file());
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn refuses_a_locked_or_different_directory() {
        let dir = tempfile::tempdir().unwrap();
        let held = RunDir::open(dir.path(), "test", &RunConfig::default()).unwrap();
        assert_eq!(RunDir::open(dir.path(), "test", &RunConfig::default()).err().unwrap().code, exit::RUN_DIR);
        drop(held);
        assert!(RunDir::open(dir.path(), "test", &RunConfig::default()).is_ok());
        let other = RunConfig { seeds: vec![9], ..Default::default() };
        assert_eq!(RunDir::open(dir.path(), "test", &other).err().unwrap().code, exit::RUN_DIR);
    }
}
