//! Acceptance gate. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{depscreen, Server};
use depscreen_core::checkpoint::load_bundle;
use depscreen_core::corpus::similarity_index;
use depscreen_core::data::{segment_stream, FeatureMatrix, Modality, PreprocessConfig, Segment};
use depscreen_core::encoder::{EncoderConfig, EncoderParams, TextEmbedderSpec};
use depscreen_core::metrics::{accuracy_ci, auc, roc_curve};
use depscreen_core::model::{ModelBundle, SessionInputs};
use depscreen_core::pipeline::{load_dataset_sessions, preprocess, split_sessions, SessionUpload, TableCache};
use depscreen_core::tensor::finite_difference_check;
use depscreen_core::training::{contrastive_loss, contrastive_loss_var, pairwise_distance, separation, TrainConfig};
use depscreen_core::{Label, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss_exactness() -> Check {
    let at = |d: f64| (vec![0.0, 0.0], vec![d, 0.0]);
    let cases = [
        (0u8, 0.0, 1.0, 0.0),
        (1, 0.0, 1.0, 0.5),
        (1, 1.0, 1.0, 0.0),
        (1, 1.7, 1.0, 0.0),
        (0, 0.6, 1.0, 0.18),
    ];
    let mut worst = 0.0f64;
    for (c, d, m, want) in cases {
        let (a, b) = at(d);
        let got = contrastive_loss(&a, &b, c, m).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    ensure(
        worst <= 1e-12,
        format!("max abs error {worst:e} over {} cases", cases.len()),
    )
}

fn tiny_encoder(input_dim: usize) -> EncoderConfig {
    EncoderConfig {
        model_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 16,
        interpolation_factor: 2,
        embedding_dim: 4,
        ..EncoderConfig::new(input_dim)
    }
}

fn gradient_correctness() -> Check {
    let started = Instant::now();
    let visual = EncoderParams::init(tiny_encoder(3), 11).unwrap();
    let audio = EncoderParams::init(tiny_encoder(2), 12).unwrap();
    let text = TextEmbedderSpec {
        dimension: 3,
        ..TextEmbedderSpec::default()
    };
    let bundle = ModelBundle::new(
        visual,
        audio,
        text,
        PreprocessConfig::default(),
        TrainConfig::default(),
        5,
    )
    .unwrap();
    let mut r = rng(5);
    let mut session = |id: &str| SessionInputs {
        session_id: id.into(),
        label: None,
        visual: vec![random_tensor(&mut r, &[6, 3]), random_tensor(&mut r, &[6, 3])],
        audio: vec![random_tensor(&mut r, &[6, 2])],
        text: unit(&mut r, 3),
        excerpt: String::new(),
    };
    let (left, right) = (session("a"), session("b"));
    let all: Vec<Tensor> = bundle.named_tensors().map(|(_, t)| t.clone()).collect();
    let mut worst = 0.0f64;
    for c in [0u8, 1] {
        for (index, point) in all.iter().enumerate() {
            let f = |tape: &mut depscreen_core::Tape, x| {
                let vars: Vec<_> = all
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == index { x } else { tape.constant(t.clone()) })
                    .collect();
                let a = bundle.forward(tape, &vars, &left)?;
                let b = bundle.forward(tape, &vars, &right)?;
                contrastive_loss_var(tape, a, b, c, 2.0)
            };
            worst = worst.max(finite_difference_check(f, point, 1e-5).map_err(|e| e.to_string())?);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        worst < 1e-4 && secs < 60.0,
        format!("{} tensors, max rel err {worst:.2e}, {secs:.1} s", all.len()),
    )
}

fn geometry() -> Check {
    let mut r = rng(99);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let d = 2 + i % 127;
        let a = unit(&mut r, d);
        let b = unit(&mut r, d);
        let dist = pairwise_distance(&a, &b).map_err(|e| e.to_string())?;
        let cos = similarity_index(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((dist * dist + 2.0 * cos - 2.0).abs());
    }
    ensure(worst < 1e-9, format!("10000 pairs, max residual {worst:.2e}"))
}

fn pair_count_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn auc_oracle() -> Check {
    let mut r = rng(4242);
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 60 {
        let n = r.random_range(2..=300);
        let levels = r.random_range(2..50);
        let scores: Vec<f64> = (0..n)
            .map(|_| r.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        if positive.iter().all(|p| *p) || positive.iter().all(|p| !*p) {
            continue;
        }
        let curve = roc_curve(&scores, &positive).map_err(|e| e.to_string())?;
        let got = auc(&curve).map_err(|e| e.to_string())?;
        worst = worst.max((got - pair_count_auc(&scores, &positive)).abs());
        instances += 1;
    }
    ensure(worst < 1e-9, format!("{instances} instances, max diff {worst:.2e}"))
}

fn ci_reproduction() -> Check {
    let ci = accuracy_ci(604, 627, 0.95).map_err(|e| e.to_string())?;
    let acc = (ci.accuracy * 100.0).round() / 100.0;
    let hw = (ci.half_width * 100.0).round() / 100.0;
    ensure(
        acc == 96.33 && hw == 1.47,
        format!("{:.4}% ± {:.4}%", ci.accuracy, ci.half_width),
    )
}

fn segmentation() -> Check {
    let config = PreprocessConfig::default();
    let rate = 2.0;
    let segments = |seconds: f64| -> Vec<Segment> {
        let rows = (seconds * rate) as usize;
        let fm = FeatureMatrix::new(
            Modality::Audio,
            rate,
            (0..rows).map(|i| i as f64 / rate).collect(),
            vec![1.0; rows * 2],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        segment_stream(&fm, "s", None, &config).unwrap()
    };
    let counts: Vec<usize> = [600.0, 320.0, 330.0].iter().map(|s| segments(*s).len()).collect();
    ensure(
        counts == [2, 1, 2],
        format!("600 s -> {}, 320 s -> {}, 330 s -> {}", counts[0], counts[1], counts[2]),
    )
}

/// Held-out separation of each pretrained encoder's segment embeddings.
fn representation(data: &Path, bundle: &Path) -> Check {
    let bundle = load_bundle(bundle).map_err(|e| e.to_string())?;
    let sessions = load_dataset_sessions(data).map_err(|e| e.to_string())?;
    let n = sessions.len();
    let (_, held_out) = split_sessions(sessions, 80);
    let mut parts = Vec::new();
    let mut ok = n == 200;
    for (name, encoder) in [("visual", &bundle.visual), ("audio", &bundle.audio)] {
        let mut emb = Vec::new();
        let mut labels: Vec<Label> = Vec::new();
        for s in &held_out {
            let p = preprocess(s, &bundle.preprocess).map_err(|e| e.to_string())?;
            let segs = if name == "visual" { p.visual } else { p.audio };
            for seg in segs {
                emb.push(encoder.encode_segment(&seg).map_err(|e| e.to_string())?);
                labels.push(seg.label.expect("synthetic sessions are labelled"));
            }
        }
        let sep = separation(&emb, &labels).map_err(|e| e.to_string())?;
        ok &= sep.mean_same_distance < sep.mean_cross_distance && sep.ordering >= 0.9;
        parts.push(format!(
            "{name}: same {:.3} < cross {:.3}, ordering {:.3}",
            sep.mean_same_distance, sep.mean_cross_distance, sep.ordering
        ));
    }
    ensure(ok, format!("{n} sessions, {}", parts.join("; ")))
}

const PIPELINE_TOML: &str = r#"
[pipeline]
fusion_hidden = 128
[pipeline.encoder]
model_dim = 16
ffn_dim = 32
num_heads = 4
embedding_dim = 32
[pipeline.preprocess]
max_steps = 24
[pipeline.train]
pretrain_epochs = 6
fusion_epochs = 6
"#;

struct Run {
    data: std::path::PathBuf,
    pretrained: std::path::PathBuf,
    bundle: std::path::PathBuf,
    corpus: std::path::PathBuf,
}

fn end_to_end(root: &Path) -> (Check, Option<Run>) {
    let started = Instant::now();
    let cfg = root.join("pipeline.toml");
    std::fs::write(&cfg, PIPELINE_TOML).unwrap();
    let run = Run {
        data: root.join("data"),
        pretrained: root.join("pretrained.ckpt"),
        bundle: root.join("bundle.ckpt"),
        corpus: root.join("corpus.jsonl"),
    };
    let report = root.join("report.json");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let c = p(&cfg);
    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth".into(),
            "--out".into(),
            p(&run.data),
            "--seed".into(),
            "7".into(),
            "--n".into(),
            "200".into(),
        ],
        vec![
            "pretrain".into(),
            "--data-dir".into(),
            p(&run.data),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            p(&run.pretrained),
            "--config".into(),
            c.clone(),
        ],
        vec![
            "train".into(),
            "--data-dir".into(),
            p(&run.data),
            "--seed".into(),
            "3".into(),
            "--bundle".into(),
            p(&run.pretrained),
            "--out".into(),
            p(&run.bundle),
            "--config".into(),
            c,
        ],
        vec![
            "corpus".into(),
            "seed".into(),
            "--data-dir".into(),
            p(&run.data),
            "--bundle".into(),
            p(&run.bundle),
            "--out".into(),
            p(&run.corpus),
        ],
        vec![
            "eval".into(),
            "--data-dir".into(),
            p(&run.data),
            "--bundle".into(),
            p(&run.bundle),
            "--corpus".into(),
            p(&run.corpus),
            "--out".into(),
            p(&report),
        ],
    ];
    for args in &steps {
        let out = depscreen(args);
        if !out.status.success() {
            let err = format!(
                "`depscreen {}` failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr)
            );
            return (Err(err), None);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let summary: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let acc = summary["report"]["accuracy"]["accuracy"].as_f64().unwrap_or(0.0);
    let auc = summary["report"]["auc"].as_f64().unwrap_or(0.0);
    let n = summary["report"]["total"].as_u64().unwrap_or(0);
    let check = ensure(
        acc >= 90.0 && auc >= 0.95 && secs < 600.0,
        format!("{n} held-out sessions, accuracy {acc:.2}%, AUC {auc:.4}, {secs:.1} s"),
    );
    (check, Some(run))
}

fn service_consistency(root: &Path, run: &Run) -> Check {
    let svc_dir = root.join("svc");
    let cfg = root.join("service.toml");
    std::fs::write(
        &cfg,
        format!(
            "[service]\ntrain_data = {:?}\n[service.eval_sets.held-out]\ndata_dir = {:?}\n",
            run.data.to_str().unwrap(),
            run.data.to_str().unwrap()
        ),
    )
    .unwrap();
    let serve_args = |first: bool| {
        let mut a = vec![
            "serve".to_string(),
            "--data-dir".into(),
            svc_dir.to_str().unwrap().into(),
            "--bind".into(),
            "127.0.0.1:0".into(),
            "--token".into(),
            "user:patient:u-secret".into(),
            "--token".into(),
            "clinician:doc:c-secret".into(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
        ];
        if first {
            a.extend(["--bundle".into(), run.bundle.to_str().unwrap().into()]);
            a.extend(["--corpus".into(), run.corpus.to_str().unwrap().into()]);
        }
        a
    };
    let server = Server::start(&serve_args(true));

    // Classification consistency on the held-out split.
    let dataset = depscreen_core::data::load_dataset(&run.data).unwrap();
    let manifests = dataset.manifest_paths(&run.data);
    let held_out: Vec<String> = {
        let sessions = load_dataset_sessions(&run.data).unwrap();
        split_sessions(sessions, 80)
            .1
            .into_iter()
            .map(|s| s.session_id)
            .collect()
    };
    let mut cache = TableCache::default();
    let mut compared = 0;
    let mut ids = Vec::new();
    for path in &manifests {
        let upload = SessionUpload::from_manifest(path, &mut cache).unwrap();
        if !held_out.contains(&upload.session_id) {
            continue;
        }
        let (status, v) = server.call(
            "POST",
            "/sessions",
            "u-secret",
            Some(json!({ "session": upload, "consent": true })),
        );
        if status != 202 {
            return Err(format!("submit returned {status}: {v}"));
        }
        ids.push((v["id"].as_str().unwrap().to_string(), path.clone()));
    }
    for (id, path) in &ids {
        let got = server.wait_processed(id, "u-secret");
        let out = depscreen(&[
            "classify",
            path.to_str().unwrap(),
            "--bundle",
            run.bundle.to_str().unwrap(),
            "--corpus",
            run.corpus.to_str().unwrap(),
        ]);
        if !out.status.success() {
            return Err(format!("classify failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        let offline: Value = serde_json::from_slice(&out.stdout).unwrap();
        for key in [
            "label",
            "uncertain",
            "class_scores",
            "top_similarity",
            "bundle_version",
            "corpus_version",
        ] {
            if got[key] != offline[key] {
                return Err(format!(
                    "session {id}: {key} differs: service {} vs offline {}",
                    got[key], offline[key]
                ));
            }
        }
        compared += 1;
    }

    // Responsiveness while a retrain runs.
    let before = server.call("GET", "/health", "c-secret", None).1;
    let (status, job) = server.call("POST", "/retrain", "c-secret", Some(json!({ "fusion_epochs": 2 })));
    if status != 202 {
        return Err(format!("retrain returned {status}: {job}"));
    }
    let job_id = job["id"].as_str().unwrap().to_string();
    let probe = &ids[0].0;
    let mut worst = Duration::ZERO;
    let mut probes_while_running = 0;
    let deadline = Instant::now() + Duration::from_secs(600);
    let final_job = loop {
        let (_, j) = server.call("GET", &format!("/retrain/{job_id}"), "c-secret", None);
        let active = matches!(j["status"].as_str(), Some("queued" | "running"));
        if !active {
            break j;
        }
        for (path, token) in [
            ("/health", "u-secret"),
            (format!("/sessions/{probe}").as_str(), "u-secret"),
            ("/triage", "c-secret"),
        ] {
            let t = Instant::now();
            let (s, _) = server.call("GET", path, token, None);
            worst = worst.max(t.elapsed());
            if s != 200 {
                return Err(format!("GET {path} returned {s} during retrain"));
            }
            probes_while_running += 1;
        }
        if Instant::now() > deadline {
            return Err("retrain did not finish in 10 minutes".into());
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    if final_job["status"] != "done" {
        return Err(format!("retrain job ended {final_job}"));
    }
    let after = server.call("GET", "/health", "c-secret", None).1;
    if after["bundle_version"].as_u64() <= before["bundle_version"].as_u64() {
        return Err(format!("bundle not published: before {before}, after {after}"));
    }
    if probes_while_running == 0 || worst > Duration::from_secs(1) {
        return Err(format!(
            "{probes_while_running} probes during retrain, slowest {worst:?}"
        ));
    }

    // Restart replay.
    let views = |s: &Server| -> Vec<Value> {
        ["/health", "/sessions", "/triage", "/corpus", "/retrain"]
            .iter()
            .map(|p| s.call("GET", p, "c-secret", None).1)
            .collect()
    };
    let state_before = views(&server);
    drop(server);
    let server = Server::start(&serve_args(false));
    let state_after = views(&server);
    if state_before != state_after {
        return Err("state after restart differs from state before".into());
    }
    Ok(format!(
        "{compared} sessions identical to offline classify; {probes_while_running} probes during retrain, slowest {:.0} ms; restart replay identical",
        worst.as_secs_f64() * 1000.0
    ))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut report = |name: &'static str, check: Check| {
        let line = match &check {
            Ok(d) => format!("PASS {name}: {d}\n"),
            Err(d) => format!("FAIL {name}: {d}\n"),
        };
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        results.push((name, check));
    };
    report("loss exactness", guarded(loss_exactness));
    report("gradient correctness", guarded(gradient_correctness));
    report("geometry consistency", guarded(geometry));
    report("auc oracle", guarded(auc_oracle));
    report("ci reproduction", guarded(ci_reproduction));
    report("segmentation", guarded(segmentation));
    let mut run = None;
    let e2e = guarded(|| {
        let (check, r) = end_to_end(root.path());
        run = r;
        check
    });
    match &run {
        Some(r) => report("representation", guarded(|| representation(&r.data, &r.pretrained))),
        None => report("representation", Err("pipeline run failed".into())),
    }
    report("end-to-end", e2e);
    match &run {
        Some(r) => report("service consistency", guarded(|| service_consistency(root.path(), r))),
        None => report("service consistency", Err("pipeline run failed".into())),
    }
    let failed: Vec<&str> = results.iter().filter(|(_, c)| c.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
