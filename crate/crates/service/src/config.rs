use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Clinician,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub token: String,
    pub role: Role,
    /// Caller identity; owns questionnaires and signs exemplar confirmations.
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetConfig {
    pub data_dir: PathBuf,
    /// Only the held-out share of the id-hash split.
    #[serde(default = "yes")]
    pub held_out: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind: SocketAddr,
    /// Checkpoint served until a retrain publishes a newer one.
    pub bundle: Option<PathBuf>,
    /// Corpus log imported on first start when the data directory has none.
    pub corpus: Option<PathBuf>,
    pub threshold: f64,
    /// Labelled dataset folded into every retrain, and the source of
    /// seed-exemplar sessions for re-embedding.
    pub train_data: Option<PathBuf>,
    pub train_percent: u8,
    pub eval_sets: BTreeMap<String, EvalSetConfig>,
    pub tokens: Vec<TokenConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("depscreen-data"),
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            bundle: None,
            corpus: None,
            threshold: depscreen_core::ClassBoundary::default().threshold(),
            train_data: None,
            train_percent: 80,
            eval_sets: BTreeMap::new(),
            tokens: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> ServiceResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> ServiceResult<()> {
        depscreen_core::ClassBoundary::new(self.threshold).map_err(|e| ServiceError::Config(e.to_string()))?;
        if self.tokens.is_empty() {
            return Err(ServiceError::Config("no access tokens configured".into()));
        }
        if self.tokens.iter().any(|t| t.token.is_empty()) {
            return Err(ServiceError::Config("empty access token".into()));
        }
        if !(1..100).contains(&self.train_percent) {
            return Err(ServiceError::Config("train_percent must be in 1..=99".into()));
        }
        Ok(())
    }

    pub(crate) fn sessions_log(&self) -> PathBuf {
        self.data_dir.join("sessions.jsonl")
    }

    pub(crate) fn corpus_log(&self) -> PathBuf {
        self.data_dir.join("corpus.jsonl")
    }

    pub(crate) fn questionnaires_log(&self) -> PathBuf {
        self.data_dir.join("questionnaires.jsonl")
    }

    pub(crate) fn jobs_log(&self) -> PathBuf {
        self.data_dir.join("jobs.jsonl")
    }

    pub(crate) fn uploads_dir(&self) -> PathBuf {
        self.data_dir.join("uploads")
    }

    pub(crate) fn bundles_dir(&self) -> PathBuf {
        self.data_dir.join("bundles")
    }
}
