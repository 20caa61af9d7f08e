#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use depscreen_core::checkpoint::save_bundle;
use depscreen_core::data::{synth_dataset, write_dataset, PreprocessConfig, SynthConfig};
use depscreen_core::encoder::EncoderConfig;
use depscreen_core::pipeline::{
    inputs_for, load_dataset_sessions, seed_exemplars, split_sessions, train, write_seed_corpus, PipelineConfig,
    SessionUpload, TableCache,
};
use depscreen_core::training::TrainConfig;
use depscreen_service::{router, AppState, EvalSetConfig, Role, ServiceConfig, TokenConfig};
use serde_json::Value;
use tower::ServiceExt;

pub const USER: &str = "user-token";
pub const ALICE: &str = "alice-token";
pub const BOB: &str = "bob-token";

/// Synthetic dataset, a small trained bundle and a seed corpus, built once
/// per test binary.
pub struct Fixture {
    pub root: PathBuf,
    pub data: PathBuf,
    pub bundle: PathBuf,
    pub corpus: PathBuf,
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("service-fixture-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        let synth = SynthConfig {
            n_sessions: 48,
            class_proportions: [0.25; 4],
            participant_seconds: 330.0,
            seed: 21,
            ..SynthConfig::default()
        };
        write_dataset(&data, &synth, &synth_dataset(&synth).unwrap()).unwrap();
        let sessions = load_dataset_sessions(&data).unwrap();
        let (train_set, _) = split_sessions(sessions, 80);
        let config = PipelineConfig {
            encoder: EncoderConfig {
                model_dim: 8,
                num_blocks: 1,
                num_heads: 2,
                ffn_dim: 16,
                interpolation_factor: 2,
                embedding_dim: 8,
                ..EncoderConfig::new(1)
            },
            fusion_hidden: 16,
            preprocess: PreprocessConfig {
                max_steps: 8,
                ..PreprocessConfig::default()
            },
            train: TrainConfig {
                pretrain_epochs: 2,
                fusion_epochs: 2,
                pairs_per_epoch: Some(64),
                seed: 5,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        };
        let report = train(&train_set, &config).unwrap();
        let bundle = root.join("bundle.ckpt");
        save_bundle(&report.bundle, &bundle).unwrap();
        let inputs = inputs_for(&train_set, &report.bundle).unwrap();
        let at = chrono::DateTime::from_timestamp(1_700_000_000, 0).unwrap();
        let corpus = root.join("corpus.jsonl");
        write_seed_corpus(&corpus, seed_exemplars(&report.bundle, &inputs, 2, at).unwrap(), at).unwrap();
        Fixture {
            root,
            data,
            bundle,
            corpus,
        }
    })
}

pub fn service_config(data_dir: &Path) -> ServiceConfig {
    let f = fixture();
    let token = |token: &str, role, name: &str| TokenConfig {
        token: token.into(),
        role,
        name: name.into(),
    };
    ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        bundle: Some(f.bundle.clone()),
        corpus: Some(f.corpus.clone()),
        threshold: 0.0,
        train_data: Some(f.data.clone()),
        eval_sets: BTreeMap::from([(
            "held-out".to_string(),
            EvalSetConfig {
                data_dir: f.data.clone(),
                held_out: true,
            },
        )]),
        tokens: vec![
            token(USER, Role::User, "patient"),
            token(ALICE, Role::Clinician, "alice"),
            token(BOB, Role::Clinician, "bob"),
        ],
        ..ServiceConfig::default()
    }
}

/// Every session of the fixture dataset as an upload, in index order.
pub fn uploads() -> Vec<SessionUpload> {
    let f = fixture();
    let dataset = depscreen_core::data::load_dataset(&f.data).unwrap();
    let mut cache = TableCache::default();
    dataset
        .manifest_paths(&f.data)
        .iter()
        .map(|p| SessionUpload::from_manifest(p, &mut cache).unwrap())
        .collect()
}

pub async fn call(
    state: &Arc<AppState>,
    method: &str,
    path: &str,
    token: Option<&str>,
    body: Option<Value>,
    idempotency_key: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    if let Some(k) = idempotency_key {
        req = req.header("idempotency-key", k);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, value)
}

pub async fn submit(
    state: &Arc<AppState>,
    upload: &SessionUpload,
    consent: bool,
    key: Option<&str>,
) -> (StatusCode, Value) {
    let body = serde_json::json!({ "session": upload, "consent": consent });
    call(state, "POST", "/sessions", Some(USER), Some(body), key).await
}

/// Polls until the session leaves `received`. Every pending response must
/// carry the pending marker and no prediction.
pub async fn wait_processed(state: &Arc<AppState>, id: &str) -> Value {
    for _ in 0..3000 {
        let (status, v) = call(state, "GET", &format!("/sessions/{id}"), Some(USER), None, None).await;
        if status == StatusCode::ACCEPTED {
            assert_eq!(v["pending"], true);
            assert!(v.get("label").is_none() && v.get("class_scores").is_none());
            tokio::time::sleep(Duration::from_millis(5)).await;
            continue;
        }
        assert_eq!(status, StatusCode::OK, "{v}");
        return v;
    }
    panic!("session {id} never processed");
}
