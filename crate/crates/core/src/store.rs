//! Line-delimited JSON files, manifests and atomic artifact writes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::HASH_ALGORITHM;

/// Schema version written into every manifest. Loaders refuse anything newer.
pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: schema version {found} is newer than supported version {supported}")]
    SchemaTooNew {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("{path}: expected artifact kind `{expected}`, found `{found}`")]
    KindMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: hash algorithm `{found}` does not match `{HASH_ALGORITHM}`")]
    HashMismatch { path: PathBuf, found: String },
    #[error("{0}")]
    Invalid(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Describes the contents of one artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub hash_algorithm: String,
    #[serde(default)]
    pub counts: BTreeMap<String, u64>,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            hash_algorithm: HASH_ALGORITHM.to_string(),
            counts: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn count(mut self, name: &str, value: usize) -> Self {
        self.counts.insert(name.to_string(), value as u64);
        self
    }

    pub fn meta(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(name.to_string(), value.into());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<(), StoreError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| StoreError::io(&path, e))
    }

    /// Read and validate `dir/manifest.json` against the expected kind.
    pub fn read(dir: &Path, expected_kind: &str) -> Result<Self, StoreError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Record {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.schema_version > SCHEMA_VERSION {
            return Err(StoreError::SchemaTooNew {
                path,
                found: manifest.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        if manifest.kind != expected_kind {
            return Err(StoreError::KindMismatch {
                path,
                expected: expected_kind.to_string(),
                found: manifest.kind,
            });
        }
        if manifest.hash_algorithm != HASH_ALGORITHM {
            return Err(StoreError::HashMismatch {
                path,
                found: manifest.hash_algorithm,
            });
        }
        Ok(manifest)
    }
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<(), StoreError> {
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|e| StoreError::Record {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|e| StoreError::io(path, e))?;
    }
    out.flush().map_err(|e| StoreError::io(path, e))
}

/// Read one JSON value per non-blank line. Errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| StoreError::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Build an artifact directory next to `target` and swap it in once `fill` succeeds.
///
/// On failure the staging directory is removed and any existing `target` is
/// left untouched.
pub fn replace_dir<F>(target: &Path, fill: F) -> Result<(), StoreError>
where
    F: FnOnce(&Path) -> Result<(), StoreError>,
{
    let parent = target
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    let name = target
        .file_name()
        .ok_or_else(|| StoreError::Invalid(format!("{} has no file name", target.display())))?;
    let staging = parent.join(format!(".{}.staging", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| StoreError::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| StoreError::io(&staging, e))?;
    if let Err(err) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(err);
    }
    if target.exists() {
        fs::remove_dir_all(target).map_err(|e| StoreError::io(target, e))?;
    }
    fs::rename(&staging, target).map_err(|e| StoreError::io(target, e))
}

/// Write a single file via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| StoreError::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}
