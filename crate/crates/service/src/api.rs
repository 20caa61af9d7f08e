use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path, Request, State};
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use depscreen_core::pipeline::SessionUpload;
use log::info;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::Role;
use crate::error::{ServiceError, ServiceResult};
use crate::state::{AppState, RetrainOverrides, SessionRecord, SessionStatus, Submitted};

type AppResult<T> = Result<T, ServiceError>;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// Authenticated caller, resolved from the bearer token.
#[derive(Debug, Clone)]
pub struct Caller {
    pub role: Role,
    pub name: String,
}

impl Caller {
    fn clinician(&self) -> AppResult<&str> {
        match self.role {
            Role::Clinician => Ok(&self.name),
            Role::User => Err(ServiceError::Forbidden),
        }
    }
}

impl FromRequestParts<Arc<AppState>> for Caller {
    type Rejection = ServiceError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> AppResult<Self> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ServiceError::Unauthorized)?;
        state
            .config()
            .tokens
            .iter()
            .find(|t| t.token == token)
            .map(|t| Caller {
                role: t.role,
                name: t.name.clone(),
            })
            .ok_or(ServiceError::Unauthorized)
    }
}

/// JSON body whose rejections use the service's error shape.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> AppResult<Self> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|e| ServiceError::BadRequest(e.body_text()))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ServiceResult<T> + Send + 'static) -> AppResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(submit_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/triage", get(triage))
        .route("/corpus", get(get_corpus))
        .route("/corpus/exemplars", post(post_exemplar))
        .route("/retrain", post(trigger_retrain).get(list_jobs))
        .route("/retrain/{id}", get(get_job))
        .route("/metrics/{eval}", get(get_metrics))
        .route("/questionnaires", post(create_questionnaire).get(list_questionnaires))
        .route(
            "/questionnaires/{id}",
            get(get_questionnaire)
                .put(update_questionnaire)
                .delete(delete_questionnaire),
        )
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// One structured line per request.
async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let response = next.run(req).await;
    info!(
        "{}",
        json!({
            "method": method.as_str(),
            "path": path,
            "status": response.status().as_u16(),
            "ms": start.elapsed().as_secs_f64() * 1e3,
        })
    );
    response
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let snap = state.snapshot();
    Json(json!({
        "status": "ok",
        "bundle_version": snap.bundle.version,
        "corpus_version": snap.corpus.version(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBody {
    session: SessionUpload,
    consent: bool,
}

async fn submit_session(
    State(state): State<Arc<AppState>>,
    _caller: Caller,
    headers: HeaderMap,
    ApiJson(body): ApiJson<SubmitBody>,
) -> AppResult<Response> {
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .map(|v| v.to_str().map(str::to_string))
        .transpose()
        .map_err(|_| ServiceError::BadRequest("idempotency key must be visible ASCII".into()))?;
    let outcome = blocking(move || state.submit(body.session, body.consent, key)).await?;
    Ok(match outcome {
        Submitted::Accepted(r) => {
            (StatusCode::ACCEPTED, Json(json!({ "id": r.id, "status": r.status }))).into_response()
        }
        Submitted::Existing(r) => (StatusCode::OK, Json(json!({ "id": r.id, "status": r.status }))).into_response(),
        Submitted::Rejected(r) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({
                "error": "invalid_data",
                "message": r.error,
                "id": r.id,
                "status": r.status,
            })),
        )
            .into_response(),
    })
}

fn session_view(state: &AppState, r: &SessionRecord) -> Value {
    let mut v = json!({
        "id": r.id,
        "session_id": r.session_id,
        "status": r.status,
        "consent": r.consent,
        "submitted_at": r.submitted_at,
    });
    match (&r.status, &r.result) {
        (SessionStatus::Received, _) => {
            v["pending"] = json!(true);
        }
        (SessionStatus::Failed, _) => {
            v["error"] = json!(r.error);
        }
        (SessionStatus::Processed, Some(c)) => {
            let corpus = state.corpus();
            let p = &c.prediction;
            let nearest: Vec<Value> = p
                .nearest
                .iter()
                .enumerate()
                .map(|(k, id)| {
                    let e = corpus.get(*id);
                    json!({
                        "class": k,
                        "exemplar_id": id,
                        "similarity": p.class_scores[k],
                        "excerpt": e.map(|e| e.excerpt.as_str()),
                    })
                })
                .collect();
            v["label"] = json!(p.label);
            v["uncertain"] = json!(p.uncertain);
            v["class_scores"] = json!(p.class_scores);
            v["top_similarity"] = json!(p.top_similarity);
            v["nearest"] = json!(nearest);
            v["bundle_version"] = json!(c.bundle_version);
            v["corpus_version"] = json!(c.corpus_version);
            v["excerpt"] = json!(r.excerpt);
            if let Some(conf) = &r.confirmed {
                v["confirmed"] = json!(conf);
            }
        }
        (SessionStatus::Processed, None) => unreachable!("processed sessions carry a result"),
    }
    v
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    _caller: Caller,
    Path(id): Path<String>,
) -> AppResult<Response> {
    let r = state
        .session(&id)
        .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
    let status = if r.status == SessionStatus::Received {
        StatusCode::ACCEPTED
    } else {
        StatusCode::OK
    };
    Ok((status, Json(session_view(&state, &r))).into_response())
}

async fn list_sessions(State(state): State<Arc<AppState>>, caller: Caller) -> AppResult<Json<Value>> {
    caller.clinician()?;
    let rows: Vec<Value> = state.sessions().iter().map(|r| session_view(&state, r)).collect();
    Ok(Json(json!(rows)))
}

async fn triage(State(state): State<Arc<AppState>>, caller: Caller) -> AppResult<Json<Value>> {
    caller.clinician()?;
    let rows: Vec<Value> = state
        .triage()
        .iter()
        .map(|r| {
            let c = r.result.as_ref().expect("triage holds processed sessions");
            json!({
                "id": r.id,
                "session_id": r.session_id,
                "label": c.prediction.label,
                "uncertain": c.prediction.uncertain,
                "top_similarity": c.prediction.top_similarity,
                "class_scores": c.prediction.class_scores,
                "submitted_at": r.submitted_at,
                "bundle_version": c.bundle_version,
                "corpus_version": c.corpus_version,
            })
        })
        .collect();
    Ok(Json(json!(rows)))
}

async fn get_corpus(State(state): State<Arc<AppState>>, caller: Caller) -> AppResult<Json<Value>> {
    caller.clinician()?;
    let corpus = state.corpus();
    let exemplars: Vec<Value> = corpus
        .exemplars()
        .iter()
        .map(|e| {
            json!({
                "id": e.id,
                "label": e.label,
                "excerpt": e.excerpt,
                "provenance": e.provenance,
                "added_at": e.added_at,
                "session_id": e.session_id,
            })
        })
        .collect();
    Ok(Json(json!({
        "version": corpus.version(),
        "class_counts": corpus.class_counts(),
        "exemplars": exemplars,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExemplarBody {
    session: String,
    label: u8,
}

async fn post_exemplar(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    ApiJson(body): ApiJson<ExemplarBody>,
) -> AppResult<Response> {
    let clinician = caller.clinician()?.to_string();
    let (version, exemplar_id) = blocking(move || state.confirm(&body.session, body.label, &clinician)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "corpus_version": version, "exemplar_id": exemplar_id })),
    )
        .into_response())
}

async fn trigger_retrain(State(state): State<Arc<AppState>>, caller: Caller, body: Bytes) -> AppResult<Response> {
    caller.clinician()?;
    let overrides: RetrainOverrides = if body.iter().all(u8::is_ascii_whitespace) {
        RetrainOverrides::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?
    };
    let job = state.trigger_retrain(overrides)?;
    Ok((StatusCode::ACCEPTED, Json(json!(job))).into_response())
}

async fn list_jobs(State(state): State<Arc<AppState>>, caller: Caller) -> AppResult<Json<Value>> {
    caller.clinician()?;
    Ok(Json(json!(state.jobs())))
}

async fn get_job(State(state): State<Arc<AppState>>, caller: Caller, Path(id): Path<String>) -> AppResult<Json<Value>> {
    caller.clinician()?;
    let job = state
        .job(&id)
        .ok_or_else(|| ServiceError::NotFound(format!("retrain job {id}")))?;
    Ok(Json(json!(job)))
}

async fn get_metrics(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(eval): Path<String>,
) -> AppResult<Json<Value>> {
    caller.clinician()?;
    let summary = blocking(move || state.metrics(&eval)).await?;
    Ok(Json(json!(summary)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionnaireBody {
    title: String,
    questions: Vec<String>,
}

async fn create_questionnaire(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    ApiJson(body): ApiJson<QuestionnaireBody>,
) -> AppResult<Response> {
    let owner = caller.clinician()?;
    let q = state.create_questionnaire(owner, body.title, body.questions)?;
    Ok((StatusCode::CREATED, Json(json!(q))).into_response())
}

/// Clinicians see their own questionnaires; users see all of them.
async fn list_questionnaires(State(state): State<Arc<AppState>>, caller: Caller) -> Json<Value> {
    let owner = (caller.role == Role::Clinician).then_some(caller.name.as_str());
    Json(json!(state.questionnaires(owner)))
}

async fn get_questionnaire(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
) -> AppResult<Json<Value>> {
    state
        .questionnaire(&id)
        .filter(|q| caller.role == Role::User || q.owner == caller.name)
        .map(|q| Json(json!(q)))
        .ok_or_else(|| ServiceError::NotFound(format!("questionnaire {id}")))
}

async fn update_questionnaire(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<QuestionnaireBody>,
) -> AppResult<Json<Value>> {
    let owner = caller.clinician()?;
    let q = state.update_questionnaire(&id, owner, body.title, body.questions)?;
    Ok(Json(json!(q)))
}

async fn delete_questionnaire(
    State(state): State<Arc<AppState>>,
    caller: Caller,
    Path(id): Path<String>,
) -> AppResult<StatusCode> {
    let owner = caller.clinician()?;
    state.delete_questionnaire(&id, owner)?;
    Ok(StatusCode::NO_CONTENT)
}
