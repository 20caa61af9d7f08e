use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Exemplar, ReferenceCorpus};
use crate::error::{Error, Result};

/// One corpus mutation. The log is one JSON record per line; replaying the
/// first `n` lines reconstructs version `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub version: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub change: CorpusChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusChange {
    Add { exemplar: Exemplar },
    Reembed { embeddings: Vec<(u64, Vec<f64>)> },
}

impl CorpusRecord {
    fn apply(&self, corpus: &mut ReferenceCorpus) -> Result<()> {
        match &self.change {
            CorpusChange::Add { exemplar } => corpus.insert(exemplar.clone())?,
            CorpusChange::Reembed { embeddings } => corpus.reembed(embeddings)?,
        }
        if corpus.version() != self.version {
            return Err(Error::invalid(format!(
                "corpus log out of sequence: record version {} applied as {}",
                self.version,
                corpus.version()
            )));
        }
        Ok(())
    }
}

/// Append-only corpus persistence.
#[derive(Debug)]
pub struct CorpusLog {
    path: PathBuf,
}

impl CorpusLog {
    /// Opens (creating if absent) the log at `path` and replays it.
    pub fn open(path: &Path) -> Result<(Self, ReferenceCorpus)> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if !path.exists() {
            File::create(path).map_err(|e| Error::io(path, e))?;
        }
        let corpus = Self::replay(path, None)?;
        Ok((
            Self {
                path: path.to_path_buf(),
            },
            corpus,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Rebuilds the corpus as of `version` (all records when `None`).
    pub fn replay(path: &Path, version: Option<u64>) -> Result<ReferenceCorpus> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut corpus = ReferenceCorpus::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if version.is_some_and(|v| corpus.version() >= v) {
                break;
            }
            let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            record.apply(&mut corpus).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        if let Some(v) = version {
            if corpus.version() != v {
                return Err(Error::invalid(format!(
                    "corpus version {v} not found (log ends at {})",
                    corpus.version()
                )));
            }
        }
        Ok(corpus)
    }

    fn append(&self, record: &CorpusRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes())
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }

    /// Applies `change` to a copy of `corpus`, persists it, and returns the
    /// new corpus. On error nothing is written and `corpus` is untouched.
    pub fn commit(
        &self,
        corpus: &ReferenceCorpus,
        change: CorpusChange,
        now: DateTime<Utc>,
    ) -> Result<ReferenceCorpus> {
        let mut next = corpus.clone();
        let record = CorpusRecord {
            version: corpus.version() + 1,
            timestamp: now,
            change,
        };
        record.apply(&mut next)?;
        self.append(&record)?;
        Ok(next)
    }

    /// Convenience wrapper building the exemplar from `corpus`'s next id.
    #[allow(clippy::too_many_arguments)]
    pub fn add(
        &self,
        corpus: &ReferenceCorpus,
        embedding: Vec<f64>,
        label: super::Label,
        excerpt: String,
        provenance: super::Provenance,
        session_id: Option<String>,
        now: DateTime<Utc>,
    ) -> Result<ReferenceCorpus> {
        let mut scratch = corpus.clone();
        let exemplar = scratch
            .add_exemplar(embedding, label, excerpt, provenance, session_id, now)?
            .clone();
        self.commit(corpus, CorpusChange::Add { exemplar }, now)
    }
}
