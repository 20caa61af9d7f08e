use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_feature_csv, load_transcript, FeatureMatrix, Modality, TranscriptTurn};
use crate::corpus::{phq8_to_label, Label};
use crate::error::{Error, Result};

/// Resources of one recorded session. Relative paths resolve against the
/// directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub visual: PathBuf,
    pub audio: PathBuf,
    pub transcript: PathBuf,
    /// Precomputed text-embedding table containing a row keyed by
    /// `session_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phq8: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_rate_hz: Option<f64>,
}

impl SessionManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.session_id.is_empty()
            || !self
                .session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::invalid(format!("invalid session id {:?}", self.session_id)));
        }
        if let Some(score) = self.phq8 {
            phq8_to_label(score)?;
        }
        Ok(())
    }

    pub fn label(&self) -> Result<Option<Label>> {
        self.phq8.map(phq8_to_label).transpose()
    }

    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// A manifest with every referenced resource loaded.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub manifest: SessionManifest,
    pub base_dir: PathBuf,
    pub visual: FeatureMatrix,
    pub audio: FeatureMatrix,
    pub transcript: Vec<TranscriptTurn>,
}

impl SessionData {
    pub fn text_embedding_path(&self) -> Option<PathBuf> {
        self.manifest
            .text_embedding
            .as_ref()
            .map(|p| self.manifest.resolve(&self.base_dir, p))
    }
}

pub fn load_session(manifest_path: &Path, visual_dim: usize, audio_dim: usize) -> Result<SessionData> {
    let manifest = SessionManifest::load(manifest_path)?;
    let base_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let visual = load_feature_csv(
        &manifest.resolve(&base_dir, &manifest.visual),
        Modality::Visual,
        visual_dim,
        manifest.visual_rate_hz,
    )?;
    let audio = load_feature_csv(
        &manifest.resolve(&base_dir, &manifest.audio),
        Modality::Audio,
        audio_dim,
        manifest.audio_rate_hz,
    )?;
    let transcript = load_transcript(&manifest.resolve(&base_dir, &manifest.transcript))?;
    Ok(SessionData {
        manifest,
        base_dir,
        visual,
        audio,
        transcript,
    })
}

/// Index file of a dataset directory (`dataset.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    /// Manifest paths relative to the dataset directory.
    pub sessions: Vec<PathBuf>,
}

pub const DATASET_INDEX: &str = "dataset.json";

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl Dataset {
    pub fn manifest_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.sessions.iter().map(|p| dir.join(p)).collect()
    }
}

/// Stable train/held-out assignment from a hash of the session id: `true`
/// when the id falls in the first `train_percent` of 100 buckets.
pub fn split_by_id(session_id: &str, train_percent: u8) -> bool {
    let digest = Sha256::digest(session_id.as_bytes());
    let bucket = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    bucket < u64::from(train_percent)
}
