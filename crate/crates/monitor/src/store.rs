//! JSON document storage on the local filesystem.
//!
//! ```text
//! <data_dir>/registry.json
//! <data_dir>/structures/<structure_id>/model.json
//! <data_dir>/structures/<structure_id>/bindings.json
//! <data_dir>/structures/<structure_id>/thresholds.json
//! <data_dir>/structures/<structure_id>/samples/<device_id>.jsonl
//! <data_dir>/structures/<structure_id>/frames.jsonl
//! <data_dir>/structures/<structure_id>/warnings.jsonl
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
}

impl StoreError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        StoreError::Io { path: path.into(), source }
    }
}

/// Identifiers become path components, so they are restricted to a safe
/// character set.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

pub fn structures_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("structures")
}

pub fn structure_dir(data_dir: &Path, structure_id: &str) -> PathBuf {
    structures_dir(data_dir).join(structure_id)
}

/// Serializes a document as pretty JSON with a trailing newline.
pub fn encode_document<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("documents always serialize");
    bytes.push(b'\n');
    bytes
}

/// Writes `value` to `path` through a temporary file and a rename, so readers
/// never see a half-written document.
pub fn write_document<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let parent = path.parent().expect("document paths have a parent");
    fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, encode_document(value)).map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Format {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Like [`read_document`], but a missing file yields `None`.
pub fn read_optional_document<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, StoreError> {
    match fs::metadata(path) {
        Ok(_) => read_document(path).map(Some),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StoreError::io(path, e)),
    }
}

/// Append-only JSON-lines files, kept open between writes.
#[derive(Debug, Default)]
pub struct JsonlAppender {
    files: HashMap<PathBuf, BufWriter<File>>,
}

impl JsonlAppender {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one line per value and flushes.
    pub fn append<'a, T, I>(&mut self, path: &Path, values: I) -> Result<(), StoreError>
    where
        T: Serialize + 'a,
        I: IntoIterator<Item = &'a T>,
    {
        let writer = match self.files.get_mut(path) {
            Some(w) => w,
            None => {
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| StoreError::io(path, e))?;
                self.files.entry(path.to_owned()).or_insert(BufWriter::new(file))
            }
        };
        for value in values {
            serde_json::to_writer(&mut *writer, value).map_err(|e| StoreError::io(path, e.into()))?;
            writer.write_all(b"\n").map_err(|e| StoreError::io(path, e))?;
        }
        writer.flush().map_err(|e| StoreError::io(path, e))
    }
}

/// Reads every line of a JSON-lines file; a missing file reads as empty.
pub fn read_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::io(path, e)),
    };
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .collect::<Result<_, _>>()
        .map_err(|e| StoreError::io(path, e))
}
