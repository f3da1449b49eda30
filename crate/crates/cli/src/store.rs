use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use entk::data::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const STORE_DIRS: [&str; 6] = ["datasets", "weights", "traces", "grams", "fits", "reports"];
pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the store root.
    pub artifact: String,
    pub hash: String,
    pub producer: String,
    pub config_hash: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Most recent entry for `artifact`.
    pub fn latest(&self, artifact: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.artifact == artifact)
    }

    /// Latest entry of every distinct artifact, in first-seen order.
    pub fn current(&self) -> Vec<&ManifestEntry> {
        let mut seen: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.artifact.as_str()) {
                seen.push(&e.artifact);
            }
        }
        seen.into_iter().filter_map(|a| self.latest(a)).collect()
    }
}

/// Removes the lock file when dropped.
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn try_lock(path: &Path) -> std::io::Result<Option<LockGuard>> {
    match OpenOptions::new().write(true).create_new(true).open(path) {
        Ok(_) => Ok(Some(LockGuard(path.to_path_buf()))),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(None),
        Err(e) => Err(e),
    }
}

/// On-disk artifact store: one directory per artifact family plus an
/// append-only manifest.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

/// A pending manifest record for an artifact written by the current command.
pub struct Written {
    pub artifact: String,
    pub hash: String,
    pub warnings: Vec<String>,
}

impl ArtifactStore {
    /// Opens `root`, creating the directory layout if needed.
    pub fn create(root: &Path) -> CliResult<Self> {
        for d in STORE_DIRS {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    /// Opens an existing store without creating anything.
    pub fn open(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an artifact that must already exist.
    pub fn require(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Missing(rel.to_string()))
        }
    }

    /// Writes an artifact through `write` into a temporary file, then renames
    /// it into place. A second writer on the same artifact is refused.
    pub fn write_with(
        &self,
        rel: &str,
        write: impl FnOnce(&Path) -> CliResult<()>,
    ) -> CliResult<Written> {
        let target = self.path(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let lock_path = with_suffix(&target, ".lock");
        let _guard = try_lock(&lock_path)?.ok_or_else(|| CliError::Locked(rel.to_string()))?;
        let tmp = with_suffix(&target, ".tmp");
        if let Err(e) = write(&tmp) {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        fs::rename(&tmp, &target)?;
        let hash = sha256_hex(&fs::read(&target)?);
        Ok(Written {
            artifact: rel.to_string(),
            hash,
            warnings: Vec::new(),
        })
    }

    pub fn write_bytes(&self, rel: &str, bytes: &[u8]) -> CliResult<Written> {
        self.write_with(rel, |p| Ok(fs::write(p, bytes)?))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<Written> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn manifest(&self) -> CliResult<Manifest> {
        let p = self.path(MANIFEST);
        if !p.is_file() {
            return Err(CliError::Missing(MANIFEST.to_string()));
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    /// Hash recorded for an input artifact, or the hash of its current bytes
    /// when the manifest has no entry for it.
    pub fn input_ref(&self, rel: &str) -> CliResult<String> {
        let hash = match self.manifest().ok().as_ref().and_then(|m| m.latest(rel)) {
            Some(e) => e.hash.clone(),
            None => sha256_hex(&fs::read(self.require(rel)?)?),
        };
        Ok(format!("{rel}@{hash}"))
    }

    /// Appends entries under the manifest lock and swaps the manifest in with
    /// an atomic rename.
    pub fn record(
        &self,
        producer: &str,
        config_hash: &str,
        inputs: &[String],
        written: Vec<Written>,
    ) -> CliResult<()> {
        let manifest_path = self.path(MANIFEST);
        let lock_path = with_suffix(&manifest_path, ".lock");
        let deadline = Instant::now() + Duration::from_secs(30);
        let _guard = loop {
            if let Some(g) = try_lock(&lock_path)? {
                break g;
            }
            if Instant::now() > deadline {
                return Err(CliError::Locked(MANIFEST.to_string()));
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let mut manifest = match self.manifest() {
            Ok(m) => m,
            Err(CliError::Missing(_)) => Manifest {
                version: MANIFEST_VERSION,
                entries: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        for w in written {
            manifest.entries.push(ManifestEntry {
                artifact: w.artifact,
                hash: w.hash,
                producer: producer.to_string(),
                config_hash: config_hash.to_string(),
                inputs: inputs.to_vec(),
                warnings: w.warnings,
            });
        }
        let tmp = with_suffix(&manifest_path, ".tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&tmp, &manifest_path)?;
        Ok(())
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
