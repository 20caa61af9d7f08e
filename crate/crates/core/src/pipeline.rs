//! End-to-end glue shared by the CLI and the service: session loading,
//! preprocessing, training, corpus seeding and classification.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    classify, ClassBoundary, CorpusChange, CorpusLog, Exemplar, Label, Prediction, Provenance, ReferenceCorpus,
    NUM_CLASSES,
};
use crate::data::{
    clean_text, load_dataset, load_session, parse_feature_csv, parse_transcript, scrub_interviewer, segment_stream,
    split_by_id, FeatureMatrix, Modality, PreprocessConfig, Segment, SessionData, SessionManifest, SynthSession,
    TranscriptTurn,
};
use crate::encoder::{EmbeddingTable, EncoderConfig, TextEmbedder, TextEmbedderSpec, TextInput, TextMode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, roc_table, EvalReport};
use crate::model::{ModelBundle, SessionInputs};
use crate::tensor::norm;
use crate::training::{pretrain_modality, train_fusion, TrainConfig};

const EXCERPT_CHARS: usize = 240;

/// A session's raw streams before scrubbing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSession {
    pub session_id: String,
    pub label: Option<Label>,
    pub visual: FeatureMatrix,
    pub audio: FeatureMatrix,
    pub transcript: Vec<TranscriptTurn>,
    /// Precomputed text embedding, if the session ships one.
    pub text_embedding: Option<Vec<f64>>,
}

/// Loads text-embedding tables once per path.
#[derive(Debug, Default)]
pub struct TableCache {
    tables: HashMap<PathBuf, EmbeddingTable>,
}

impl TableCache {
    pub fn get(&mut self, path: &Path) -> Result<&EmbeddingTable> {
        if !self.tables.contains_key(path) {
            let table = EmbeddingTable::load(path)?;
            self.tables.insert(path.to_path_buf(), table);
        }
        Ok(&self.tables[path])
    }
}

impl RawSession {
    pub fn from_data(data: SessionData, cache: &mut TableCache) -> Result<Self> {
        let text_embedding = match data.text_embedding_path() {
            Some(path) => Some(
                cache
                    .get(&path)?
                    .get(&data.manifest.session_id)
                    .ok_or_else(|| Error::MissingKey(data.manifest.session_id.clone()))?
                    .to_vec(),
            ),
            None => None,
        };
        Ok(Self {
            label: data.manifest.label()?,
            session_id: data.manifest.session_id,
            visual: data.visual,
            audio: data.audio,
            transcript: data.transcript,
            text_embedding,
        })
    }
}

impl From<SynthSession> for RawSession {
    fn from(s: SynthSession) -> Self {
        Self {
            session_id: s.manifest.session_id,
            label: Some(s.label),
            visual: s.visual,
            audio: s.audio,
            transcript: s.transcript,
            text_embedding: Some(s.text_embedding),
        }
    }
}

pub fn load_raw_session(
    manifest: &Path,
    visual_dim: usize,
    audio_dim: usize,
    cache: &mut TableCache,
) -> Result<RawSession> {
    RawSession::from_data(load_session(manifest, visual_dim, audio_dim)?, cache)
}

/// Loads every session listed in a dataset directory's index.
pub fn load_dataset_sessions(dir: &Path) -> Result<Vec<RawSession>> {
    let dataset = load_dataset(dir)?;
    let mut cache = TableCache::default();
    dataset
        .manifest_paths(dir)
        .iter()
        .map(|p| load_raw_session(p, dataset.visual_dim, dataset.audio_dim, &mut cache))
        .collect()
}

/// A session submitted as inline text rather than files: feature CSVs and
/// transcript TSV in the on-disk formats, plus an optional precomputed text
/// embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionUpload {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phq8: Option<u8>,
    pub visual_csv: String,
    pub audio_csv: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_rate_hz: Option<f64>,
}

impl SessionUpload {
    /// Reads a manifest and everything it references into an upload.
    pub fn from_manifest(manifest_path: &Path, cache: &mut TableCache) -> Result<Self> {
        let m = SessionManifest::load(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let read = |p: &Path| {
            let p = m.resolve(&base, p);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let text_embedding = match &m.text_embedding {
            Some(p) => Some(
                cache
                    .get(&m.resolve(&base, p))?
                    .get(&m.session_id)
                    .ok_or_else(|| Error::MissingKey(m.session_id.clone()))?
                    .to_vec(),
            ),
            None => None,
        };
        Ok(Self {
            visual_csv: read(&m.visual)?,
            audio_csv: read(&m.audio)?,
            transcript: read(&m.transcript)?,
            session_id: m.session_id,
            phq8: m.phq8,
            text_embedding,
            visual_rate_hz: m.visual_rate_hz,
            audio_rate_hz: m.audio_rate_hz,
        })
    }

    /// Parses the payloads under the same rules as files on disk. Parse
    /// errors name the payload field in place of a path.
    pub fn parse(&self, visual_dim: usize, audio_dim: usize) -> Result<RawSession> {
        let manifest = SessionManifest {
            session_id: self.session_id.clone(),
            visual: "visual_csv".into(),
            audio: "audio_csv".into(),
            transcript: "transcript".into(),
            text_embedding: None,
            phq8: self.phq8,
            visual_rate_hz: self.visual_rate_hz,
            audio_rate_hz: self.audio_rate_hz,
        };
        manifest.validate()?;
        let visual = parse_feature_csv(
            &self.visual_csv,
            Path::new("visual_csv"),
            Modality::Visual,
            visual_dim,
            self.visual_rate_hz,
        )?;
        let audio = parse_feature_csv(
            &self.audio_csv,
            Path::new("audio_csv"),
            Modality::Audio,
            audio_dim,
            self.audio_rate_hz,
        )?;
        let transcript = parse_transcript(&self.transcript, Path::new("transcript"))?;
        if let Some(v) = &self.text_embedding {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("text embedding has non-finite values"));
            }
        }
        Ok(RawSession {
            label: manifest.label()?,
            session_id: manifest.session_id,
            visual,
            audio,
            transcript,
            text_embedding: self.text_embedding.clone(),
        })
    }
}

/// Splits sessions by id hash into (train, held-out).
pub fn split_sessions(sessions: Vec<RawSession>, train_percent: u8) -> (Vec<RawSession>, Vec<RawSession>) {
    sessions
        .into_iter()
        .partition(|s| split_by_id(&s.session_id, train_percent))
}

/// Scrubbed, segmented, pooled streams of one session.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub visual: Vec<Segment>,
    pub audio: Vec<Segment>,
    pub participant_text: String,
}

/// Drops interviewer time ranges from both feature streams and cuts the
/// rest into pooled windows. A stream with nothing left yields no segments.
pub fn preprocess(raw: &RawSession, config: &PreprocessConfig) -> Result<Preprocessed> {
    let scrubbed = scrub_interviewer(&raw.transcript)?;
    let cut = |fm: &FeatureMatrix| -> Result<Vec<Segment>> {
        let kept = fm.without_ranges(&scrubbed.excluded);
        if kept.is_empty() {
            return Ok(Vec::new());
        }
        segment_stream(&kept, &raw.session_id, raw.label, config)
    };
    Ok(Preprocessed {
        visual: cut(&raw.visual)?,
        audio: cut(&raw.audio)?,
        participant_text: clean_text(&scrubbed.participant_text()),
    })
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("text embedding has zero or non-finite norm"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Text embedding from the session's precomputed vector or, in toy mode,
/// from its cleaned participant text. Empty when neither is available.
fn session_text(raw: &RawSession, text: &str, spec: &TextEmbedderSpec, toy: Option<&TextEmbedder>) -> Result<Vec<f64>> {
    match (&raw.text_embedding, spec.mode) {
        (Some(v), _) => {
            if v.len() != spec.dimension {
                return Err(Error::Dimension {
                    expected: spec.dimension,
                    found: v.len(),
                });
            }
            unit(v.clone())
        }
        (None, TextMode::ToyHashedNgram) if !text.is_empty() => match toy {
            Some(e) => e.embed(TextInput::Text(text)),
            None => TextEmbedder::toy(*spec)?.embed(TextInput::Text(text)),
        },
        _ => Ok(Vec::new()),
    }
}

pub fn session_inputs(
    raw: &RawSession,
    preprocess_config: &PreprocessConfig,
    spec: &TextEmbedderSpec,
    toy: Option<&TextEmbedder>,
) -> Result<SessionInputs> {
    let p = preprocess(raw, preprocess_config)?;
    let text = session_text(raw, &p.participant_text, spec, toy)?;
    Ok(SessionInputs {
        session_id: raw.session_id.clone(),
        label: raw.label,
        visual: p.visual.into_iter().map(|s| s.frames).collect(),
        audio: p.audio.into_iter().map(|s| s.frames).collect(),
        text,
        excerpt: p.participant_text.chars().take(EXCERPT_CHARS).collect(),
    })
}

/// Architecture shared by both time-series encoders; `input_dim` is taken
/// from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub fusion_hidden: usize,
    pub preprocess: PreprocessConfig,
    pub text: TextEmbedderSpec,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::new(1),
            fusion_hidden: 128,
            preprocess: PreprocessConfig::default(),
            text: TextEmbedderSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub bundle: ModelBundle,
    pub visual_history: Vec<f64>,
    pub audio_history: Vec<f64>,
    pub fusion_history: Vec<f64>,
    pub warnings: Vec<String>,
    pub excluded: Vec<String>,
}

fn modality_segments(prepped: &[Preprocessed], modality: Modality) -> Vec<Segment> {
    prepped
        .iter()
        .flat_map(|p| match modality {
            Modality::Visual => p.visual.iter(),
            Modality::Audio => p.audio.iter(),
        })
        .filter(|s| s.label.is_some())
        .cloned()
        .collect()
}

/// Pretrains both encoders on labelled segments and wraps them with a fresh
/// fusion network (no fusion epochs yet).
pub fn pretrain(sessions: &[RawSession], config: &PipelineConfig) -> Result<(ModelBundle, TrainReport)> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::invalid("no sessions to train on"))?;
    let prepped = sessions
        .iter()
        .map(|s| preprocess(s, &config.preprocess))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    let mut run = |modality: Modality, dim: usize| -> Result<_> {
        let enc = EncoderConfig {
            input_dim: dim,
            ..config.encoder
        };
        enc.validate()?;
        let segments = modality_segments(&prepped, modality);
        info!("pretraining {modality} encoder on {} segments", segments.len());
        let out = pretrain_modality(&segments, &config.train, &enc)?;
        warnings.extend(out.warnings.iter().map(|w| format!("{modality}: {w}")));
        Ok(out)
    };
    let visual = run(Modality::Visual, first.visual.dim())?;
    let audio = run(Modality::Audio, first.audio.dim())?;
    let mut bundle = ModelBundle::new(
        visual.encoder,
        audio.encoder,
        config.text,
        config.preprocess,
        config.train,
        config.fusion_hidden,
    )?;
    bundle.metadata.pretrain_epochs = config.train.pretrain_epochs;
    bundle.metadata.final_loss = audio.history.last().copied();
    let report = TrainReport {
        bundle: bundle.clone(),
        visual_history: visual.history,
        audio_history: audio.history,
        fusion_history: Vec::new(),
        warnings,
        excluded: Vec::new(),
    };
    Ok((bundle, report))
}

/// Embedder for toy-mode text, built once per bundle.
pub fn toy_embedder(spec: &TextEmbedderSpec) -> Result<Option<TextEmbedder>> {
    match spec.mode {
        TextMode::ToyHashedNgram => Ok(Some(TextEmbedder::toy(*spec)?)),
        TextMode::PrecomputedFile => Ok(None),
    }
}

pub fn inputs_for(sessions: &[RawSession], bundle: &ModelBundle) -> Result<Vec<SessionInputs>> {
    let toy = toy_embedder(&bundle.text)?;
    sessions
        .iter()
        .map(|s| session_inputs(s, &bundle.preprocess, &bundle.text, toy.as_ref()))
        .collect()
}

/// Fine-tunes `bundle` end to end on `sessions`.
pub fn fuse(
    bundle: ModelBundle,
    sessions: &[RawSession],
    config: &TrainConfig,
) -> Result<(ModelBundle, Vec<f64>, Vec<String>)> {
    let inputs = inputs_for(sessions, &bundle)?;
    let out = train_fusion(bundle, &inputs, config)?;
    Ok((out.bundle, out.history, out.excluded))
}

/// Pretraining followed by fusion training.
pub fn train(sessions: &[RawSession], config: &PipelineConfig) -> Result<TrainReport> {
    let (bundle, mut report) = pretrain(sessions, config)?;
    let (bundle, history, excluded) = fuse(bundle, sessions, &config.train)?;
    report.bundle = bundle;
    report.fusion_history = history;
    report.excluded = excluded;
    Ok(report)
}

/// Picks, per class, the `per_class` items closest to the class mean
/// embedding, standing in for expert selection of typical answers.
/// Returned indices are grouped by class, nearest first.
pub fn select_exemplars(embeddings: &[Vec<f64>], labels: &[Label], per_class: usize) -> Result<Vec<usize>> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("embedding and label counts differ"));
    }
    let mut out = Vec::new();
    for k in Label::all() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(k.value()));
        }
        let dim = embeddings[members[0]].len();
        let mut centroid = vec![0.0; dim];
        for &i in &members {
            for (c, v) in centroid.iter_mut().zip(&embeddings[i]) {
                *c += v;
            }
        }
        let mut ranked: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| {
                let d: f64 = embeddings[i]
                    .iter()
                    .zip(&centroid)
                    .map(|(a, c)| {
                        let x = a - c / members.len() as f64;
                        x * x
                    })
                    .sum();
                (d, i)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(ranked.iter().take(per_class).map(|&(_, i)| i));
    }
    Ok(out)
}

/// Embeds labelled sessions and returns seed exemplars for a fresh corpus,
/// `per_class` per class.
pub fn seed_exemplars(
    bundle: &ModelBundle,
    sessions: &[SessionInputs],
    per_class: usize,
    now: DateTime<Utc>,
) -> Result<Vec<Exemplar>> {
    let usable: Vec<&SessionInputs> = sessions
        .iter()
        .filter(|s| s.is_complete() && s.label.is_some())
        .collect();
    let embeddings = usable
        .iter()
        .map(|s| bundle.embed_session(s))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = usable.iter().map(|s| s.label.expect("filtered")).collect();
    let picked = select_exemplars(&embeddings, &labels, per_class)?;
    let mut scratch = ReferenceCorpus::new();
    picked
        .into_iter()
        .map(|i| {
            scratch
                .add_exemplar(
                    embeddings[i].clone(),
                    labels[i],
                    usable[i].excerpt.clone(),
                    Provenance::SeedCorpus,
                    Some(usable[i].session_id.clone()),
                    now,
                )
                .cloned()
        })
        .collect()
}

/// Starts a corpus log at `path` holding `exemplars`. Refuses to touch an
/// existing file.
pub fn write_seed_corpus(path: &Path, exemplars: Vec<Exemplar>, now: DateTime<Utc>) -> Result<ReferenceCorpus> {
    if path.exists() {
        return Err(Error::invalid(format!("{} already exists", path.display())));
    }
    let (log, mut corpus) = CorpusLog::open(path)?;
    for exemplar in exemplars {
        corpus = log.commit(&corpus, CorpusChange::Add { exemplar }, now)?;
    }
    Ok(corpus)
}

/// Output of classifying one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classified {
    pub session_id: String,
    pub embedding: Vec<f64>,
    pub prediction: Prediction,
    pub bundle_version: u64,
    pub corpus_version: u64,
}

pub fn classify_inputs(
    bundle: &ModelBundle,
    corpus: &ReferenceCorpus,
    boundary: ClassBoundary,
    inputs: &SessionInputs,
) -> Result<Classified> {
    let embedding = bundle.embed_session(inputs)?;
    let prediction = classify(&embedding, corpus, boundary)?;
    Ok(Classified {
        session_id: inputs.session_id.clone(),
        embedding,
        prediction,
        bundle_version: bundle.version,
        corpus_version: corpus.version(),
    })
}

pub fn classify_session(
    bundle: &ModelBundle,
    corpus: &ReferenceCorpus,
    boundary: ClassBoundary,
    raw: &RawSession,
) -> Result<Classified> {
    let toy = toy_embedder(&bundle.text)?;
    let inputs = session_inputs(raw, &bundle.preprocess, &bundle.text, toy.as_ref())?;
    classify_inputs(bundle, corpus, boundary, &inputs)
}

/// Fresh embeddings for every exemplar that came from a known session, for
/// a corpus carried over to a retrained bundle.
pub fn reembed_exemplars(
    bundle: &ModelBundle,
    corpus: &ReferenceCorpus,
    inputs_by_session: &HashMap<String, SessionInputs>,
) -> Result<Vec<(u64, Vec<f64>)>> {
    corpus
        .exemplars()
        .iter()
        .filter_map(|e| {
            let s = inputs_by_session.get(e.session_id.as_ref()?)?;
            Some(bundle.embed_session(s).map(|v| (e.id, v)))
        })
        .collect()
}

/// Labelled held-out results for metrics.
pub fn evaluate_sessions(
    bundle: &ModelBundle,
    corpus: &ReferenceCorpus,
    boundary: ClassBoundary,
    sessions: &[RawSession],
) -> Result<Vec<(Label, Classified)>> {
    let toy = toy_embedder(&bundle.text)?;
    sessions
        .iter()
        .map(|s| {
            let label = s
                .label
                .ok_or_else(|| Error::invalid(format!("session {} has no label", s.session_id)))?;
            let inputs = session_inputs(s, &bundle.preprocess, &bundle.text, toy.as_ref())?;
            Ok((label, classify_inputs(bundle, corpus, boundary, &inputs)?))
        })
        .collect()
}

/// Metrics of one labelled set under fixed bundle and corpus versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub bundle_version: u64,
    pub corpus_version: u64,
    pub threshold: f64,
    pub report: EvalReport,
    /// `threshold,fpr,tpr` table, when the set has both screening classes.
    pub roc_table: Option<String>,
}

pub fn evaluate_dataset(
    bundle: &ModelBundle,
    corpus: &ReferenceCorpus,
    boundary: ClassBoundary,
    sessions: &[RawSession],
) -> Result<EvalSummary> {
    let results: Vec<(Label, Prediction)> = evaluate_sessions(bundle, corpus, boundary, sessions)?
        .into_iter()
        .map(|(l, c)| (l, c.prediction))
        .collect();
    let report = evaluate(&results)?;
    let roc_table = report.roc.as_ref().map(roc_table).transpose()?;
    Ok(EvalSummary {
        bundle_version: bundle.version,
        corpus_version: corpus.version(),
        threshold: boundary.threshold(),
        report,
        roc_table,
    })
}

/// Per-class counts of a label list.
pub fn class_histogram(labels: impl IntoIterator<Item = Label>) -> [usize; NUM_CLASSES] {
    let mut out = [0; NUM_CLASSES];
    for l in labels {
        out[l.index()] += 1;
    }
    out
}
