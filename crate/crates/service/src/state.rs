//! Stores, snapshots and the background work behind the HTTP handlers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use depscreen_core::checkpoint::{load_bundle, save_bundle};
use depscreen_core::corpus::{CorpusChange, CorpusLog, Provenance};
use depscreen_core::model::SessionInputs;
use depscreen_core::pipeline::{
    classify_inputs, evaluate_dataset, inputs_for, load_dataset_sessions, reembed_exemplars, session_inputs,
    split_sessions, toy_embedder, Classified, EvalSummary, RawSession, SessionUpload,
};
use depscreen_core::training::{train_fusion, TrainConfig};
use depscreen_core::{triage_rank, ClassBoundary, Label, ModelBundle, Prediction, ReferenceCorpus};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::{ServiceError, ServiceResult};
use crate::store::{write_atomic, JsonlLog};

/// Bundle and corpus published together; both are immutable once built.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub bundle: Arc<ModelBundle>,
    pub corpus: Arc<ReferenceCorpus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Received,
    Processed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confirmation {
    pub label: Label,
    pub clinician: String,
    pub exemplar_id: u64,
    pub corpus_version: u64,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    /// Identifier supplied by the client in the upload.
    pub session_id: String,
    pub status: SessionStatus,
    pub consent: bool,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    /// Label implied by a PHQ-8 score in the upload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Classified>,
    #[serde(default)]
    pub excerpt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmed: Option<Confirmation>,
}

impl SessionRecord {
    /// Label usable for training: a clinician's confirmation, else the
    /// reported score when the subject consented to sharing.
    fn training_label(&self) -> Option<Label> {
        match &self.confirmed {
            Some(c) => Some(c.label),
            None if self.consent => self.reported_label,
            None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub id: String,
    pub owner: String,
    pub title: String,
    pub questions: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum QuestionnaireEvent {
    Put { questionnaire: Questionnaire },
    Delete { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainOverrides {
    pub fusion_epochs: Option<usize>,
    pub margin: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub pairs_per_epoch: Option<usize>,
}

impl RetrainOverrides {
    fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            fusion_epochs: self.fusion_epochs.unwrap_or(base.fusion_epochs),
            margin: self.margin.unwrap_or(base.margin),
            seed: self.seed.unwrap_or(base.seed),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            pairs_per_epoch: self.pairs_per_epoch.or(base.pairs_per_epoch),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub epochs: usize,
    pub first: Option<f64>,
    pub last: Option<f64>,
    pub history: Vec<f64>,
    pub sessions: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub id: String,
    pub status: JobStatus,
    pub created_at: DateTime<Utc>,
    pub overrides: RetrainOverrides,
    pub base_bundle_version: u64,
    /// Corpus version when training data was gathered.
    pub corpus_version: Option<u64>,
    pub bundle_version: Option<u64>,
    /// Checkpoint file name under the bundles directory.
    pub bundle_file: Option<String>,
    /// Corpus version the job's re-embedding produces. Set just before the
    /// corpus is touched, so a restart can tell whether the commit landed.
    #[serde(default)]
    pub commit_corpus_version: Option<u64>,
    pub loss: Option<LossSummary>,
    pub error: Option<String>,
    pub finished_at: Option<DateTime<Utc>>,
}

/// Everything persisted, for comparing state across restarts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateDump {
    pub bundle_version: u64,
    pub corpus: ReferenceCorpus,
    pub sessions: Vec<SessionRecord>,
    pub questionnaires: Vec<Questionnaire>,
    pub jobs: Vec<RetrainJob>,
}

/// Latest record per id, kept in first-seen order.
#[derive(Debug)]
struct Table<T> {
    rows: BTreeMap<String, T>,
    order: Vec<String>,
}

impl<T> Table<T> {
    fn new() -> Self {
        Self {
            rows: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    fn put(&mut self, id: &str, row: T) {
        if self.rows.insert(id.to_string(), row).is_none() {
            self.order.push(id.to_string());
        }
    }

    fn remove(&mut self, id: &str) {
        if self.rows.remove(id).is_some() {
            self.order.retain(|x| x != id);
        }
    }

    fn get(&self, id: &str) -> Option<&T> {
        self.rows.get(id)
    }

    fn iter(&self) -> impl Iterator<Item = &T> {
        self.order.iter().map(|id| &self.rows[id])
    }
}

struct Sessions {
    log: JsonlLog<SessionRecord>,
    table: Table<SessionRecord>,
    keys: HashMap<String, String>,
}

impl Sessions {
    fn put(&mut self, record: SessionRecord) -> ServiceResult<()> {
        self.log.append(&record)?;
        self.index(record);
        Ok(())
    }

    fn index(&mut self, record: SessionRecord) {
        if let Some(k) = &record.idempotency_key {
            self.keys.insert(k.clone(), record.id.clone());
        }
        self.table.put(&record.id.clone(), record);
    }
}

struct Questionnaires {
    log: JsonlLog<QuestionnaireEvent>,
    table: Table<Questionnaire>,
}

struct Jobs {
    log: JsonlLog<RetrainJob>,
    table: Table<RetrainJob>,
}

impl Jobs {
    fn put(&mut self, job: RetrainJob) -> ServiceResult<()> {
        self.log.append(&job)?;
        self.table.put(&job.id.clone(), job);
        Ok(())
    }

    fn active(&self) -> Option<&RetrainJob> {
        self.table.iter().find(|j| j.status.is_active())
    }
}

/// Outcome of a submission.
#[derive(Debug, Clone, PartialEq)]
pub enum Submitted {
    Accepted(SessionRecord),
    /// Idempotency key seen before.
    Existing(SessionRecord),
    /// Stored as failed; the payload did not parse.
    Rejected(SessionRecord),
}

pub struct AppState {
    config: ServiceConfig,
    boundary: ClassBoundary,
    snapshot: RwLock<Snapshot>,
    sessions: Mutex<Sessions>,
    corpus_log: Mutex<CorpusLog>,
    questionnaires: Mutex<Questionnaires>,
    jobs: Mutex<Jobs>,
    datasets: Mutex<HashMap<PathBuf, Arc<Vec<RawSession>>>>,
    in_flight: AtomicUsize,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn now() -> DateTime<Utc> {
    Utc::now()
}

impl AppState {
    /// Opens every store under the data directory and replays it.
    pub fn open(config: ServiceConfig) -> ServiceResult<Arc<Self>> {
        config.validate()?;
        let io = |p: &PathBuf, e: std::io::Error| ServiceError::Storage(format!("{}: {e}", p.display()));
        fs::create_dir_all(&config.data_dir).map_err(|e| io(&config.data_dir, e))?;
        fs::create_dir_all(config.uploads_dir()).map_err(|e| io(&config.uploads_dir(), e))?;
        fs::create_dir_all(config.bundles_dir()).map_err(|e| io(&config.bundles_dir(), e))?;

        let (jobs_log, job_rows) = JsonlLog::<RetrainJob>::open(&config.jobs_log())?;
        let mut jobs = Jobs {
            log: jobs_log,
            table: Table::new(),
        };
        for j in job_rows {
            jobs.table.put(&j.id.clone(), j);
        }
        let corpus_path = config.corpus_log();
        if !corpus_path.exists() {
            if let Some(src) = &config.corpus {
                fs::copy(src, &corpus_path).map_err(|e| io(src, e))?;
            }
        }
        let (corpus_log, corpus) = CorpusLog::open(&corpus_path)?;

        let (session_log, session_rows) = JsonlLog::<SessionRecord>::open(&config.sessions_log())?;
        let mut sessions = Sessions {
            log: session_log,
            table: Table::new(),
            keys: HashMap::new(),
        };
        for r in session_rows {
            sessions.index(r);
        }

        let (q_log, q_rows) = JsonlLog::<QuestionnaireEvent>::open(&config.questionnaires_log())?;
        let mut questionnaires = Questionnaires {
            log: q_log,
            table: Table::new(),
        };
        for e in q_rows {
            match e {
                QuestionnaireEvent::Put { questionnaire } => {
                    questionnaires.table.put(&questionnaire.id.clone(), questionnaire)
                }
                QuestionnaireEvent::Delete { id } => questionnaires.table.remove(&id),
            }
        }

        // A job cut short by a restart either never reached its corpus
        // commit (failed) or did, in which case it is completed.
        let interrupted: Vec<RetrainJob> = jobs.table.iter().filter(|j| j.status.is_active()).cloned().collect();
        for mut j in interrupted {
            let committed = j.commit_corpus_version.is_some_and(|v| corpus.version() >= v)
                && j.bundle_file
                    .as_ref()
                    .is_some_and(|f| config.bundles_dir().join(f).is_file());
            if committed {
                j.status = JobStatus::Done;
                j.error = None;
            } else {
                j.status = JobStatus::Failed;
                j.error = Some("interrupted by service restart".into());
            }
            j.finished_at = Some(now());
            jobs.put(j)?;
        }

        let published = jobs
            .table
            .iter()
            .filter(|j| j.status == JobStatus::Done)
            .filter_map(|j| j.bundle_file.clone())
            .last();
        let bundle_path = match published {
            Some(file) => config.bundles_dir().join(file),
            None => config
                .bundle
                .clone()
                .ok_or_else(|| ServiceError::Config("no model bundle configured".into()))?,
        };
        let bundle = load_bundle(&bundle_path)?;
        if let Some(d) = corpus.embedding_dim() {
            if d != bundle.embedding_dim() {
                return Err(ServiceError::Config(format!(
                    "corpus embeddings have dimension {d}, bundle produces {}",
                    bundle.embedding_dim()
                )));
            }
        }

        let boundary = ClassBoundary::new(config.threshold)?;
        let state = Arc::new(Self {
            boundary,
            snapshot: RwLock::new(Snapshot {
                bundle: Arc::new(bundle),
                corpus: Arc::new(corpus),
            }),
            sessions: Mutex::new(sessions),
            corpus_log: Mutex::new(corpus_log),
            questionnaires: Mutex::new(questionnaires),
            jobs: Mutex::new(jobs),
            datasets: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            config,
        });
        let unprocessed: Vec<String> = lock(&state.sessions)
            .table
            .iter()
            .filter(|r| r.status == SessionStatus::Received)
            .map(|r| r.id.clone())
            .collect();
        for id in unprocessed {
            state.schedule(id);
        }
        Ok(state)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn publish(&self, snapshot: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = snapshot;
    }

    fn upload_path(&self, id: &str) -> PathBuf {
        self.config.uploads_dir().join(format!("{id}.json"))
    }

    fn load_upload(&self, id: &str) -> ServiceResult<SessionUpload> {
        let path = self.upload_path(id);
        let text = fs::read_to_string(&path).map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))
    }

    fn parse_upload(&self, upload: &SessionUpload, bundle: &ModelBundle) -> ServiceResult<RawSession> {
        Ok(upload.parse(bundle.visual.config().input_dim, bundle.audio.config().input_dim)?)
    }

    fn inputs(&self, raw: &RawSession, bundle: &ModelBundle) -> ServiceResult<SessionInputs> {
        let toy = toy_embedder(&bundle.text)?;
        Ok(session_inputs(raw, &bundle.preprocess, &bundle.text, toy.as_ref())?)
    }

    /// Stores the upload and schedules classification.
    pub fn submit(
        self: &Arc<Self>,
        upload: SessionUpload,
        consent: bool,
        idempotency_key: Option<String>,
    ) -> ServiceResult<Submitted> {
        if let Some(k) = &idempotency_key {
            let sessions = lock(&self.sessions);
            if let Some(id) = sessions.keys.get(k) {
                return Ok(Submitted::Existing(sessions.table.get(id).expect("indexed").clone()));
            }
        }
        let snap = self.snapshot();
        let parsed = self.parse_upload(&upload, &snap.bundle);
        let id = uuid::Uuid::new_v4().to_string();
        let bytes = serde_json::to_vec(&upload).map_err(|e| ServiceError::Storage(e.to_string()))?;
        write_atomic(&self.upload_path(&id), &bytes)?;
        let mut record = SessionRecord {
            id: id.clone(),
            session_id: upload.session_id.clone(),
            status: SessionStatus::Received,
            consent,
            submitted_at: now(),
            idempotency_key: idempotency_key.clone(),
            reported_label: parsed.as_ref().ok().and_then(|r| r.label),
            result: None,
            excerpt: String::new(),
            error: None,
            confirmed: None,
        };
        if let Err(e) = &parsed {
            record.status = SessionStatus::Failed;
            record.error = Some(e.to_string());
        }
        {
            let mut sessions = lock(&self.sessions);
            if let Some(existing) = idempotency_key.as_ref().and_then(|k| sessions.keys.get(k)) {
                let existing = sessions.table.get(existing).expect("indexed").clone();
                drop(sessions);
                let _ = fs::remove_file(self.upload_path(&id));
                return Ok(Submitted::Existing(existing));
            }
            sessions.put(record.clone())?;
        }
        if record.status == SessionStatus::Failed {
            return Ok(Submitted::Rejected(record));
        }
        self.schedule(id);
        Ok(Submitted::Accepted(record))
    }

    fn schedule(self: &Arc<Self>, id: String) {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let state = Arc::clone(self);
        let work = move || {
            if let Err(e) = state.process(&id) {
                warn!("processing {id} failed to persist: {e}");
            }
            state.in_flight.fetch_sub(1, Ordering::SeqCst);
        };
        match tokio::runtime::Handle::try_current() {
            Ok(h) => {
                h.spawn_blocking(work);
            }
            Err(_) => {
                std::thread::spawn(work);
            }
        }
    }

    /// Classifies a received session against the snapshot current when
    /// processing starts.
    fn process(&self, id: &str) -> ServiceResult<()> {
        let snap = self.snapshot();
        let outcome = self.load_upload(id).and_then(|upload| {
            let raw = self.parse_upload(&upload, &snap.bundle)?;
            let inputs = self.inputs(&raw, &snap.bundle)?;
            let classified = classify_inputs(&snap.bundle, &snap.corpus, self.boundary, &inputs)?;
            Ok((classified, inputs.excerpt))
        });
        let mut sessions = lock(&self.sessions);
        let mut record = sessions
            .table
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
        match outcome {
            Ok((classified, excerpt)) => {
                record.status = SessionStatus::Processed;
                record.result = Some(classified);
                record.excerpt = excerpt;
            }
            Err(e) => {
                record.status = SessionStatus::Failed;
                record.error = Some(e.to_string());
            }
        }
        sessions.put(record)
    }

    /// Number of sessions still waiting for classification.
    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Resolves once no classification and no retrain job is running.
    pub async fn wait_idle(&self) {
        while self.in_flight() > 0 || lock(&self.jobs).active().is_some() {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub fn session(&self, id: &str) -> Option<SessionRecord> {
        lock(&self.sessions).table.get(id).cloned()
    }

    pub fn sessions(&self) -> Vec<SessionRecord> {
        lock(&self.sessions).table.iter().cloned().collect()
    }

    /// Processed sessions in consultation order.
    pub fn triage(&self) -> Vec<SessionRecord> {
        let sessions = lock(&self.sessions);
        let preds: Vec<(String, Prediction)> = sessions
            .table
            .iter()
            .filter_map(|r| Some((r.id.clone(), r.result.as_ref()?.prediction.clone())))
            .collect();
        triage_rank(&preds)
            .into_iter()
            .map(|(id, _)| sessions.table.get(&id).expect("indexed").clone())
            .collect()
    }

    pub fn corpus(&self) -> Arc<ReferenceCorpus> {
        self.snapshot().corpus
    }

    /// Adds a processed session's fused embedding to the corpus under a
    /// clinician-confirmed label. Returns the new corpus version and the
    /// exemplar id.
    pub fn confirm(&self, id: &str, label: u8, clinician: &str) -> ServiceResult<(u64, u64)> {
        let label = Label::new(label)?;
        let record = self
            .session(id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
        let result = match (&record.status, &record.result) {
            (SessionStatus::Processed, Some(r)) => r.clone(),
            _ => return Err(ServiceError::Conflict(format!("session {id} is not processed"))),
        };
        let log = lock(&self.corpus_log);
        let snap = self.snapshot();
        let embedding = if result.bundle_version == snap.bundle.version {
            result.embedding
        } else {
            let raw = self.parse_upload(&self.load_upload(id)?, &snap.bundle)?;
            snap.bundle.embed_session(&self.inputs(&raw, &snap.bundle)?)?
        };
        let at = now();
        let corpus = log.add(
            &snap.corpus,
            embedding,
            label,
            record.excerpt.clone(),
            Provenance::ClinicianAdded,
            Some(id.to_string()),
            at,
        )?;
        let exemplar_id = corpus.exemplars().last().expect("just added").id;
        let version = corpus.version();
        self.publish(Snapshot {
            bundle: snap.bundle,
            corpus: Arc::new(corpus),
        });
        drop(log);
        let mut sessions = lock(&self.sessions);
        let mut record = sessions.table.get(id).expect("exists").clone();
        record.confirmed = Some(Confirmation {
            label,
            clinician: clinician.to_string(),
            exemplar_id,
            corpus_version: version,
            at,
        });
        sessions.put(record)?;
        Ok((version, exemplar_id))
    }

    pub fn questionnaires(&self, owner: Option<&str>) -> Vec<Questionnaire> {
        lock(&self.questionnaires)
            .table
            .iter()
            .filter(|q| owner.map_or(true, |o| q.owner == o))
            .cloned()
            .collect()
    }

    pub fn questionnaire(&self, id: &str) -> Option<Questionnaire> {
        lock(&self.questionnaires).table.get(id).cloned()
    }

    fn check_questions(title: &str, questions: &[String]) -> ServiceResult<()> {
        if questions.is_empty() {
            return Err(ServiceError::BadRequest(
                "a questionnaire needs at least one question".into(),
            ));
        }
        if let Some(i) = questions.iter().position(|q| q.trim().is_empty()) {
            return Err(ServiceError::BadRequest(format!("question {i} is empty")));
        }
        if title.trim().is_empty() {
            return Err(ServiceError::BadRequest("title is empty".into()));
        }
        Ok(())
    }

    pub fn create_questionnaire(
        &self,
        owner: &str,
        title: String,
        questions: Vec<String>,
    ) -> ServiceResult<Questionnaire> {
        Self::check_questions(&title, &questions)?;
        let at = now();
        let q = Questionnaire {
            id: uuid::Uuid::new_v4().to_string(),
            owner: owner.to_string(),
            title,
            questions,
            created_at: at,
            updated_at: at,
        };
        let mut store = lock(&self.questionnaires);
        store.log.append(&QuestionnaireEvent::Put {
            questionnaire: q.clone(),
        })?;
        store.table.put(&q.id, q.clone());
        Ok(q)
    }

    fn owned(store: &Questionnaires, id: &str, owner: &str) -> ServiceResult<Questionnaire> {
        store
            .table
            .get(id)
            .filter(|q| q.owner == owner)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("questionnaire {id}")))
    }

    pub fn update_questionnaire(
        &self,
        id: &str,
        owner: &str,
        title: String,
        questions: Vec<String>,
    ) -> ServiceResult<Questionnaire> {
        Self::check_questions(&title, &questions)?;
        let mut store = lock(&self.questionnaires);
        let mut q = Self::owned(&store, id, owner)?;
        q.title = title;
        q.questions = questions;
        q.updated_at = now();
        store.log.append(&QuestionnaireEvent::Put {
            questionnaire: q.clone(),
        })?;
        store.table.put(id, q.clone());
        Ok(q)
    }

    pub fn delete_questionnaire(&self, id: &str, owner: &str) -> ServiceResult<()> {
        let mut store = lock(&self.questionnaires);
        Self::owned(&store, id, owner)?;
        store.log.append(&QuestionnaireEvent::Delete { id: id.to_string() })?;
        store.table.remove(id);
        Ok(())
    }

    pub fn job(&self, id: &str) -> Option<RetrainJob> {
        lock(&self.jobs).table.get(id).cloned()
    }

    pub fn jobs(&self) -> Vec<RetrainJob> {
        lock(&self.jobs).table.iter().cloned().collect()
    }

    /// Queues a fusion retrain unless one is already active.
    pub fn trigger_retrain(self: &Arc<Self>, overrides: RetrainOverrides) -> ServiceResult<RetrainJob> {
        let mut jobs = lock(&self.jobs);
        if let Some(active) = jobs.active() {
            return Err(ServiceError::Conflict(
                format!("retrain job {} is still {:?}", active.id, active.status).to_lowercase(),
            ));
        }
        let job = RetrainJob {
            id: uuid::Uuid::new_v4().to_string(),
            status: JobStatus::Queued,
            created_at: now(),
            overrides,
            base_bundle_version: self.snapshot().bundle.version,
            corpus_version: None,
            bundle_version: None,
            bundle_file: None,
            commit_corpus_version: None,
            loss: None,
            error: None,
            finished_at: None,
        };
        jobs.put(job.clone())?;
        drop(jobs);
        let state = Arc::clone(self);
        let id = job.id.clone();
        std::thread::spawn(move || state.run_job(&id));
        Ok(job)
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut RetrainJob)) -> ServiceResult<RetrainJob> {
        let mut jobs = lock(&self.jobs);
        let mut job = jobs
            .table
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
        f(&mut job);
        jobs.put(job.clone())?;
        Ok(job)
    }

    fn run_job(&self, id: &str) {
        let result = self.retrain(id);
        let outcome = match result {
            Ok(()) => Ok(()),
            Err(e) => {
                warn!("retrain {id} failed: {e}");
                self.update_job(id, |j| {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                    j.finished_at = Some(now());
                })
                .map(|_| ())
            }
        };
        if let Err(e) = outcome {
            warn!("retrain {id}: could not record outcome: {e}");
        }
    }

    fn dataset(&self, dir: &PathBuf) -> ServiceResult<Arc<Vec<RawSession>>> {
        if let Some(d) = lock(&self.datasets).get(dir) {
            return Ok(Arc::clone(d));
        }
        let sessions = Arc::new(load_dataset_sessions(dir)?);
        lock(&self.datasets).insert(dir.clone(), Arc::clone(&sessions));
        Ok(sessions)
    }

    /// Training sessions of the configured dataset plus every service
    /// session with a usable label. Service sessions are keyed by their
    /// service id so clinician-added exemplars can be re-embedded.
    fn training_sessions(&self, bundle: &ModelBundle) -> ServiceResult<Vec<RawSession>> {
        let mut out = Vec::new();
        if let Some(dir) = &self.config.train_data {
            let all = self.dataset(dir)?;
            let (train, _) = split_sessions(all.as_ref().clone(), self.config.train_percent);
            out.extend(train);
        }
        for r in self.sessions() {
            if r.status != SessionStatus::Processed {
                continue;
            }
            if let Some(label) = r.training_label() {
                let mut raw = self.parse_upload(&self.load_upload(&r.id)?, bundle)?;
                raw.session_id = r.id.clone();
                raw.label = Some(label);
                out.push(raw);
            }
        }
        Ok(out)
    }

    /// Inputs for an exemplar source session not in the training set.
    fn exemplar_inputs(&self, session_id: &str, bundle: &ModelBundle) -> ServiceResult<Option<SessionInputs>> {
        if self.session(session_id).is_some() {
            let mut raw = self.parse_upload(&self.load_upload(session_id)?, bundle)?;
            raw.session_id = session_id.to_string();
            return Ok(Some(self.inputs(&raw, bundle)?));
        }
        if let Some(dir) = &self.config.train_data {
            if let Some(raw) = self.dataset(dir)?.iter().find(|s| s.session_id == session_id) {
                return Ok(Some(self.inputs(raw, bundle)?));
            }
        }
        Ok(None)
    }

    fn retrain(&self, id: &str) -> ServiceResult<()> {
        let start = self.snapshot();
        let job = self.update_job(id, |j| {
            j.status = JobStatus::Running;
            j.corpus_version = Some(start.corpus.version());
        })?;
        info!("retrain {id}: gathering data");
        let sessions = self.training_sessions(&start.bundle)?;
        let inputs = inputs_for(&sessions, &start.bundle)?;
        let config = job.overrides.apply(start.bundle.train);
        let out = train_fusion(start.bundle.as_ref().clone(), &inputs, &config)?;
        let bundle = out.bundle;
        let file = format!("bundle-v{}.ckpt", bundle.version);
        save_bundle(&bundle, &self.config.bundles_dir().join(&file))?;

        let mut by_session: HashMap<String, SessionInputs> =
            inputs.into_iter().map(|s| (s.session_id.clone(), s)).collect();
        let log = lock(&self.corpus_log);
        let current = self.snapshot();
        for e in current.corpus.exemplars() {
            let sid = e.session_id.as_ref().ok_or_else(|| {
                ServiceError::Conflict(format!(
                    "exemplar {} has no source session and cannot be re-embedded",
                    e.id
                ))
            })?;
            if !by_session.contains_key(sid) {
                let s = self.exemplar_inputs(sid, &bundle)?.ok_or_else(|| {
                    ServiceError::Conflict(format!(
                        "exemplar {}: source session {sid} is unavailable for re-embedding",
                        e.id
                    ))
                })?;
                by_session.insert(sid.clone(), s);
            }
        }
        let updates = reembed_exemplars(&bundle, &current.corpus, &by_session)?;
        let target = current.corpus.version() + u64::from(!updates.is_empty());
        self.update_job(id, |j| {
            j.bundle_file = Some(file.clone());
            j.bundle_version = Some(bundle.version);
            j.commit_corpus_version = Some(target);
        })?;
        let corpus = if updates.is_empty() {
            current.corpus.as_ref().clone()
        } else {
            log.commit(&current.corpus, CorpusChange::Reembed { embeddings: updates }, now())?
        };
        let version = bundle.version;
        self.publish(Snapshot {
            bundle: Arc::new(bundle),
            corpus: Arc::new(corpus),
        });
        drop(log);
        let history = out.history;
        self.update_job(id, |j| {
            j.status = JobStatus::Done;
            j.bundle_version = Some(version);
            j.bundle_file = Some(file);
            j.loss = Some(LossSummary {
                epochs: history.len(),
                first: history.first().copied(),
                last: history.last().copied(),
                history,
                sessions: sessions.len(),
                excluded: out.excluded.len(),
            });
            j.finished_at = Some(now());
        })?;
        info!("retrain {id}: published bundle v{version}");
        Ok(())
    }

    pub fn metrics(&self, eval: &str) -> ServiceResult<EvalSummary> {
        let set = self
            .config
            .eval_sets
            .get(eval)
            .ok_or_else(|| ServiceError::NotFound(format!("evaluation set {eval:?}")))?;
        let all = self.dataset(&set.data_dir)?;
        let sessions = if set.held_out {
            split_sessions(all.as_ref().clone(), self.config.train_percent).1
        } else {
            all.as_ref().clone()
        };
        let snap = self.snapshot();
        Ok(evaluate_dataset(&snap.bundle, &snap.corpus, self.boundary, &sessions)?)
    }

    pub fn dump(&self) -> StateDump {
        let snap = self.snapshot();
        StateDump {
            bundle_version: snap.bundle.version,
            corpus: snap.corpus.as_ref().clone(),
            sessions: self.sessions(),
            questionnaires: self.questionnaires(None),
            jobs: self.jobs(),
        }
    }
}
