use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ServiceError, ServiceResult};

/// Append-only log of JSON records, one per line, synced on every append.
#[derive(Debug)]
pub struct JsonlLog<T> {
    path: PathBuf,
    _record: PhantomData<fn(T)>,
}

impl<T: Serialize + DeserializeOwned> JsonlLog<T> {
    /// Opens (creating if needed) the log and returns every stored record.
    pub fn open(path: &Path) -> ServiceResult<(Self, Vec<T>)> {
        let io = |e: std::io::Error| ServiceError::Storage(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        if !path.exists() {
            File::create(path).map_err(io)?;
        }
        let mut records = Vec::new();
        for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| ServiceError::Storage(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(record);
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                _record: PhantomData,
            },
            records,
        ))
    }

    pub fn append(&self, record: &T) -> ServiceResult<()> {
        let io = |e: std::io::Error| ServiceError::Storage(format!("{}: {e}", self.path.display()));
        let mut line = serde_json::to_string(record).map_err(|e| ServiceError::Storage(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.sync_data().map_err(io)
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> ServiceResult<()> {
    let io = |e: std::io::Error| ServiceError::Storage(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}
