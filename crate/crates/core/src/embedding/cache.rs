//! Content-addressed on-disk embedding cache.
//!
//! Layout: one pair of files per record in the cache directory,
//! `<key>.f32` (little-endian f32 values) and `<key>.json`
//! (`{"dim", "model_id", "created_at"}`), where `key` is the hex SHA-256 of
//! the content bytes followed by a NUL byte and the model id.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dim: usize,
    model_id: String,
    /// Seconds since the Unix epoch.
    created_at: u64,
}

pub fn cache_key(content: &[u8], model_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(content);
    h.update([0u8]);
    h.update(model_id.as_bytes());
    hex::encode(h.finalize())
}

/// Any number of concurrent readers; writers are serialized.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{key}.f32")),
            self.dir.join(format!("{key}.json")),
        )
    }

    /// Returns the cached values, or `None` on a miss. Corrupt records are
    /// reported and treated as misses so the caller recomputes them.
    pub fn get(&self, key: &str, model_id: &str) -> Option<Vec<f32>> {
        let (values_path, header_path) = self.paths(key);
        let header_text = match fs::read_to_string(&header_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache record {key}: unreadable header ({e}); recomputing");
                return None;
            }
        };
        let header: Header = match serde_json::from_str(&header_text) {
            Ok(h) => h,
            Err(e) => {
                log::warn!("cache record {key}: corrupt header ({e}); recomputing");
                return None;
            }
        };
        if header.model_id != model_id {
            log::warn!(
                "cache record {key}: model {:?} does not match {model_id:?}; recomputing",
                header.model_id
            );
            return None;
        }
        let bytes = match fs::read(&values_path) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("cache record {key}: unreadable values ({e}); recomputing");
                return None;
            }
        };
        if bytes.len() != header.dim * 4 || header.dim == 0 {
            log::warn!(
                "cache record {key}: {} bytes for dim {}; recomputing",
                bytes.len(),
                header.dim
            );
            return None;
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            log::warn!("cache record {key}: non-finite values; recomputing");
            return None;
        }
        Some(values)
    }

    pub fn put(&self, key: &str, model_id: &str, values: &[f32]) -> Result<()> {
        let _guard = self.write_lock.lock().expect("cache write lock poisoned");
        let (values_path, header_path) = self.paths(key);
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let header = Header {
            dim: values.len(),
            model_id: model_id.to_string(),
            created_at,
        };
        // Values first: a reader only trusts a record once its header exists.
        write_atomic(&values_path, &bytes)?;
        write_atomic(&header_path, &serde_json::to_vec(&header)?)?;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp{}",
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::file(&tmp, e))?;
    f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(())
}
