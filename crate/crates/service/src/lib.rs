//! HTTP triage service over the screening engine.
//!
//! State lives in append-only JSON-lines logs under one data directory:
//! `sessions.jsonl`, `corpus.jsonl`, `questionnaires.jsonl` and `jobs.jsonl`,
//! plus uploaded payloads and published checkpoints. Restarting replays the
//! logs.

pub mod api;
pub mod config;
pub mod error;
pub mod state;
pub mod store;

use std::future::Future;
use std::sync::Arc;

pub use api::{router, Caller, IDEMPOTENCY_HEADER};
pub use config::{EvalSetConfig, Role, ServiceConfig, TokenConfig};
pub use error::{ServiceError, ServiceResult};
pub use state::{
    AppState, JobStatus, LossSummary, Questionnaire, RetrainJob, RetrainOverrides, SessionRecord, SessionStatus,
    Snapshot, StateDump,
};

/// Serves `state` on an already bound listener until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> ServiceResult<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Storage(format!("server: {e}")))
}
