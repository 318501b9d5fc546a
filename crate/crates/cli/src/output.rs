//! Output directory layout, run lock and per-directory manifests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOCK_FILE: &str = ".untangle.lock";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Area {
    Predictions,
    Checkpoints,
    Reports,
    Images,
}

impl Area {
    pub const ALL: [Area; 4] = [Area::Predictions, Area::Checkpoints, Area::Reports, Area::Images];

    pub fn dir_name(self) -> &'static str {
        match self {
            Area::Predictions => "predictions",
            Area::Checkpoints => "checkpoints",
            Area::Reports => "reports",
            Area::Images => "images",
        }
    }
}

/// Envelope written around every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    pub data: T,
}

impl<T> Artifact<T> {
    pub fn new(kind: &str, config_hash: &str, data: T) -> Self {
        Self {
            kind: kind.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub config_hash: String,
    pub tool_version: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

/// Lowercase alphanumerics, everything else collapsed to `-`.
pub fn slug(text: &str) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push('x');
    }
    out
}

/// Short config-hash prefix used in file names.
pub fn short_hash(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// An output directory owned by this process until dropped.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    /// Creates the layout and takes the lock; fails if another run holds it.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is in use by another run (remove {} if that run is gone)",
                    root.display(),
                    lock.display()
                );
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        let out = Self {
            root: root.to_path_buf(),
            lock,
        };
        for area in Area::ALL {
            let dir = out.dir(area);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            if !dir.join(MANIFEST).exists() {
                write_atomic(&dir.join(MANIFEST), &to_json_bytes(&Manifest::default())?)?;
            }
        }
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, area: Area) -> PathBuf {
        self.root.join(area.dir_name())
    }

    pub fn path(&self, area: Area, file: &str) -> PathBuf {
        self.dir(area).join(file)
    }

    /// Writes `bytes` to `area/file` and records it in that area's manifest.
    pub fn write(&self, area: Area, file: &str, bytes: &[u8], kind: &str, command: Option<&str>, config_hash: &str) -> Result<PathBuf> {
        let path = self.path(area, file);
        write_atomic(&path, bytes)?;
        self.record(area, file, kind, command, config_hash)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, area: Area, file: &str, artifact: &Artifact<T>, command: Option<&str>) -> Result<PathBuf> {
        self.write(area, file, &to_json_bytes(artifact)?, &artifact.kind, command, &artifact.config_hash)
    }

    /// Adds an already written file to the manifest.
    pub fn record(&self, area: Area, file: &str, kind: &str, command: Option<&str>, config_hash: &str) -> Result<()> {
        let bytes = fs::read(self.path(area, file)).with_context(|| format!("reading {file}"))?;
        let mut manifest = read_manifest(&self.dir(area))?;
        manifest.files.insert(
            file.to_string(),
            ManifestEntry {
                kind: kind.into(),
                command: command.map(str::to_string),
                config_hash: config_hash.into(),
                tool_version: TOOL_VERSION.into(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
        write_atomic(&self.dir(area).join(MANIFEST), &to_json_bytes(&manifest)?)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Artifact<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("grey hair"), "grey-hair");
        assert_eq!(slug("  With  Glasses! "), "with-glasses");
        assert_eq!(slug("!!"), "x");
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let a = OutputDir::open(tmp.path()).unwrap();
        let err = OutputDir::open(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("in use"));
        drop(a);
        let b = OutputDir::open(tmp.path()).unwrap();
        for area in Area::ALL {
            assert!(b.dir(area).join(MANIFEST).is_file());
        }
    }

    #[test]
    fn manifest_records_hash_and_version() {
        let tmp = tempfile::tempdir().unwrap();
        let out = OutputDir::open(tmp.path()).unwrap();
        let art = Artifact::new("demo", "abc", vec![1, 2]);
        out.write_json(Area::Reports, "demo.json", &art, Some("cmd")).unwrap();
        let m = read_manifest(&out.dir(Area::Reports)).unwrap();
        let e = &m.files["demo.json"];
        assert_eq!((e.kind.as_str(), e.config_hash.as_str()), ("demo", "abc"));
        assert_eq!(e.tool_version, TOOL_VERSION);
        let back: Artifact<Vec<i32>> = read_artifact(&out.path(Area::Reports, "demo.json")).unwrap();
        assert_eq!(back, art);
    }
}
