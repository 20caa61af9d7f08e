use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use depscreen_core::checkpoint::{load_bundle, save_bundle};
use depscreen_core::corpus::{CorpusLog, Provenance};
use depscreen_core::data::{synth_dataset, write_dataset, SynthConfig};
use depscreen_core::pipeline::{
    classify_session, evaluate_dataset, fuse, inputs_for, load_dataset_sessions, load_raw_session, pretrain,
    seed_exemplars, split_sessions, train, write_seed_corpus, EvalSummary, PipelineConfig, RawSession, TableCache,
};
use depscreen_core::{ClassBoundary, ModelBundle, ReferenceCorpus};
use depscreen_service::{AppState, Role, ServiceConfig, TokenConfig};
use log::info;
use serde_json::json;

use crate::cli::{ClassifyArgs, CorpusAction, EvalArgs, ServeArgs, SynthArgs, TrainArgs};
use crate::config::{overlay, pick, FileConfig};
use crate::error::CliError;

pub type CmdResult = Result<(), CliError>;

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

/// Creation time for new corpus records; `SOURCE_DATE_EPOCH` pins it for
/// reproducible files.
fn timestamp() -> Result<DateTime<Utc>, CliError> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => s
            .trim()
            .parse::<i64>()
            .ok()
            .and_then(|t| DateTime::from_timestamp(t, 0))
            .ok_or_else(|| CliError::user(format!("bad SOURCE_DATE_EPOCH {s:?}"))),
        Err(_) => Ok(Utc::now()),
    }
}

fn need_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::user(format!("{}: no such file", path.display())))
    }
}

fn bundle_at(path: &Path) -> Result<ModelBundle, CliError> {
    need_file(path)?;
    Ok(load_bundle(path)?)
}

fn corpus_at(path: &Path) -> Result<ReferenceCorpus, CliError> {
    need_file(path)?;
    Ok(CorpusLog::replay(path, None)?)
}

fn dataset(dir: &Path) -> Result<Vec<RawSession>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::user(format!("{}: not a directory", dir.display())));
    }
    Ok(load_dataset_sessions(dir)?)
}

fn boundary(file: &FileConfig, flag: Option<f64>) -> Result<ClassBoundary, CliError> {
    let t = file.threshold.or(flag).unwrap_or(ClassBoundary::default().threshold());
    Ok(ClassBoundary::new(t)?)
}

pub fn synth(args: SynthArgs) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let out = pick(file.out.clone(), args.out, "out")?;
    let seed = pick(file.seed, args.seed, "seed")?;
    let base = SynthConfig {
        n_sessions: file.n.unwrap_or(args.n),
        seed,
        ..SynthConfig::default()
    };
    let mut config: SynthConfig = overlay(&base, file.synth.as_ref(), "synth")?;
    config.seed = seed;
    config.validate()?;
    if out.exists() && fs::read_dir(&out).map_err(CliError::user)?.next().is_some() {
        return Err(CliError::user(format!("{} is not empty", out.display())));
    }
    let sessions = synth_dataset(&config)?;
    write_dataset(&out, &config, &sessions)?;
    print_json(json!({ "dataset": out, "sessions": sessions.len(), "seed": seed }));
    Ok(())
}

fn pipeline_config(file: &FileConfig, args: &TrainArgs) -> Result<PipelineConfig, CliError> {
    let mut base = PipelineConfig::default();
    base.train.seed = pick(file.seed, args.seed, "seed")?;
    if let Some(e) = args.epochs {
        base.train.pretrain_epochs = e;
        base.train.fusion_epochs = e;
    }
    if let Some(m) = args.margin {
        base.train.margin = m;
    }
    let mut config: PipelineConfig = overlay(&base, file.pipeline.as_ref(), "pipeline")?;
    if let Some(s) = file.seed {
        config.train.seed = s;
    }
    if let Some(e) = file.epochs {
        config.train.pretrain_epochs = e;
        config.train.fusion_epochs = e;
    }
    if let Some(m) = file.margin {
        config.train.margin = m;
    }
    config.train.validate()?;
    Ok(config)
}

fn training_split(file: &FileConfig, dir: &Path) -> Result<Vec<RawSession>, CliError> {
    let (train, _) = split_sessions(dataset(dir)?, file.train_percent());
    if train.is_empty() {
        return Err(CliError::user("training split is empty"));
    }
    Ok(train)
}

fn held_out(file: &FileConfig, dir: &Path) -> Result<Vec<RawSession>, CliError> {
    let (_, test) = split_sessions(dataset(dir)?, file.train_percent());
    if test.is_empty() {
        return Err(CliError::user("held-out split is empty"));
    }
    Ok(test)
}

pub fn pretrain_cmd(args: TrainArgs) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let config = pipeline_config(&file, &args)?;
    let data_dir = pick(file.data_dir.clone(), args.data_dir.clone(), "data-dir")?;
    let out = pick(file.out.clone(), args.out.clone(), "out")?;
    let sessions = training_split(&file, &data_dir)?;
    info!("pretraining on {} sessions", sessions.len());
    let (bundle, report) = pretrain(&sessions, &config)?;
    save_bundle(&bundle, &out)?;
    print_json(json!({
        "bundle": out,
        "version": bundle.version,
        "sessions": sessions.len(),
        "visual_loss": report.visual_history,
        "audio_loss": report.audio_history,
        "warnings": report.warnings,
    }));
    Ok(())
}

pub fn train_cmd(args: TrainArgs) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let config = pipeline_config(&file, &args)?;
    let data_dir = pick(file.data_dir.clone(), args.data_dir.clone(), "data-dir")?;
    let out = pick(file.out.clone(), args.out.clone(), "out")?;
    let start = file.bundle.clone().or(args.bundle.clone());
    let sessions = training_split(&file, &data_dir)?;
    let summary = match start {
        Some(path) => {
            let bundle = bundle_at(&path)?;
            let (bundle, history, excluded) = fuse(bundle, &sessions, &config.train)?;
            save_bundle(&bundle, &out)?;
            json!({
                "bundle": out,
                "version": bundle.version,
                "sessions": sessions.len(),
                "fusion_loss": history,
                "excluded": excluded,
            })
        }
        None => {
            let report = train(&sessions, &config)?;
            save_bundle(&report.bundle, &out)?;
            json!({
                "bundle": out,
                "version": report.bundle.version,
                "sessions": sessions.len(),
                "visual_loss": report.visual_history,
                "audio_loss": report.audio_history,
                "fusion_loss": report.fusion_history,
                "excluded": report.excluded,
                "warnings": report.warnings,
            })
        }
    };
    print_json(summary);
    Ok(())
}

fn evaluation(args: &EvalArgs) -> Result<(FileConfig, EvalSummary), CliError> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let bundle = bundle_at(&pick(file.bundle.clone(), args.bundle.clone(), "bundle")?)?;
    let corpus = corpus_at(&pick(file.corpus.clone(), args.corpus.clone(), "corpus")?)?;
    let data_dir = pick(file.data_dir.clone(), args.data_dir.clone(), "data-dir")?;
    let boundary = boundary(&file, args.threshold)?;
    let sessions = held_out(&file, &data_dir)?;
    let summary = evaluate_dataset(&bundle, &corpus, boundary, &sessions)?;
    Ok((file, summary))
}

fn write_out(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::user(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let (file, summary) = evaluation(&args)?;
    let r = &summary.report;
    println!(
        "bundle v{} corpus v{} threshold {} sessions {}",
        summary.bundle_version, summary.corpus_version, summary.threshold, r.total
    );
    println!(
        "accuracy {:.2}% ± {:.2}% (95% CI)",
        r.accuracy.accuracy, r.accuracy.half_width
    );
    match r.covered_accuracy {
        Some(a) => println!("coverage {:.2}% covered accuracy {a:.2}%", 100.0 * r.coverage),
        None => println!("coverage 0.00%"),
    }
    match r.auc {
        Some(a) => println!("auc {a:.4}"),
        None => println!("auc n/a (one screening class)"),
    }
    print!("{}", r.confusion);
    if let Some(out) = file.out.clone().or(args.out) {
        let json = serde_json::to_string_pretty(&summary).map_err(CliError::internal)? + "\n";
        write_out(&out, &json)?;
    }
    Ok(())
}

pub fn roc_export(args: EvalArgs) -> CmdResult {
    let (file, summary) = evaluation(&args)?;
    let out = pick(file.out.clone(), args.out.clone(), "out")?;
    let table = summary
        .roc_table
        .ok_or_else(|| CliError::user("held-out set has a single screening class; no ROC curve"))?;
    write_out(&out, &table)?;
    print_json(json!({ "roc": out, "auc": summary.report.auc }));
    Ok(())
}

fn load_manifest(path: &Path, bundle: &ModelBundle) -> Result<RawSession, CliError> {
    need_file(path)?;
    Ok(load_raw_session(
        path,
        bundle.visual.config().input_dim,
        bundle.audio.config().input_dim,
        &mut TableCache::default(),
    )?)
}

pub fn classify(args: ClassifyArgs) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let bundle = bundle_at(&pick(file.bundle.clone(), args.bundle, "bundle")?)?;
    let corpus = corpus_at(&pick(file.corpus.clone(), args.corpus, "corpus")?)?;
    let boundary = boundary(&file, args.threshold)?;
    let raw = load_manifest(&args.manifest, &bundle)?;
    let c = classify_session(&bundle, &corpus, boundary, &raw)?;
    print_json(json!({
        "session_id": c.session_id,
        "label": c.prediction.label,
        "uncertain": c.prediction.uncertain,
        "class_scores": c.prediction.class_scores,
        "nearest": c.prediction.nearest,
        "top_similarity": c.prediction.top_similarity,
        "bundle_version": c.bundle_version,
        "corpus_version": c.corpus_version,
    }));
    Ok(())
}

pub fn corpus(action: CorpusAction) -> CmdResult {
    match action {
        CorpusAction::Seed {
            data_dir,
            bundle,
            out,
            per_class,
            config,
        } => {
            let file = FileConfig::load(config.config.as_deref())?;
            let bundle = bundle_at(&pick(file.bundle.clone(), bundle, "bundle")?)?;
            let out = pick(file.out.clone(), out, "out")?;
            let sessions = training_split(&file, &pick(file.data_dir.clone(), data_dir, "data-dir")?)?;
            let inputs = inputs_for(&sessions, &bundle)?;
            let at = timestamp()?;
            let exemplars = seed_exemplars(&bundle, &inputs, file.per_class.unwrap_or(per_class), at)?;
            let corpus = write_seed_corpus(&out, exemplars, at)?;
            print_json(json!({ "corpus": out, "version": corpus.version(), "class_counts": corpus.class_counts() }));
        }
        CorpusAction::List { corpus, config } => {
            let file = FileConfig::load(config.config.as_deref())?;
            let corpus = corpus_at(&pick(file.corpus.clone(), corpus, "corpus")?)?;
            let exemplars: Vec<_> = corpus
                .exemplars()
                .iter()
                .map(|e| {
                    json!({
                        "id": e.id,
                        "label": e.label,
                        "provenance": e.provenance,
                        "session_id": e.session_id,
                        "added_at": e.added_at,
                        "excerpt": e.excerpt,
                    })
                })
                .collect();
            print_json(json!({
                "version": corpus.version(),
                "class_counts": corpus.class_counts(),
                "exemplars": exemplars,
            }));
        }
        CorpusAction::Add {
            manifest,
            label,
            bundle,
            corpus,
            config,
        } => {
            let file = FileConfig::load(config.config.as_deref())?;
            let bundle = bundle_at(&pick(file.bundle.clone(), bundle, "bundle")?)?;
            let path = pick(file.corpus.clone(), corpus, "corpus")?;
            need_file(&path)?;
            let label = depscreen_core::Label::new(label)?;
            let raw = load_manifest(&manifest, &bundle)?;
            let inputs = depscreen_core::pipeline::session_inputs(
                &raw,
                &bundle.preprocess,
                &bundle.text,
                depscreen_core::pipeline::toy_embedder(&bundle.text)?.as_ref(),
            )?;
            let embedding = bundle.embed_session(&inputs)?;
            let (log, current) = CorpusLog::open(&path)?;
            let at = timestamp()?;
            let next = log.add(
                &current,
                embedding,
                label,
                inputs.excerpt,
                Provenance::ClinicianAdded,
                Some(raw.session_id),
                at,
            )?;
            let id = next.exemplars().last().expect("just added").id;
            print_json(json!({ "corpus_version": next.version(), "exemplar_id": id }));
        }
    }
    Ok(())
}

fn parse_token(spec: &str) -> Result<TokenConfig, CliError> {
    let mut parts = spec.splitn(3, ':');
    let (role, name, token) = match (parts.next(), parts.next(), parts.next()) {
        (Some(r), Some(n), Some(t)) if !n.is_empty() && !t.is_empty() => (r, n, t),
        _ => {
            return Err(CliError::user(format!(
                "--token expects ROLE:NAME:SECRET, got {spec:?}"
            )))
        }
    };
    let role = match role {
        "user" => Role::User,
        "clinician" => Role::Clinician,
        other => return Err(CliError::user(format!("unknown role {other:?}"))),
    };
    Ok(TokenConfig {
        token: token.to_string(),
        role,
        name: name.to_string(),
    })
}

pub fn serve(args: ServeArgs) -> CmdResult {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let mut base = ServiceConfig::default();
    if let Some(d) = args.data_dir {
        base.data_dir = d;
    }
    if let Some(b) = args.bind {
        base.bind = b;
    }
    base.bundle = args.bundle.or(base.bundle);
    base.corpus = args.corpus.or(base.corpus);
    if let Some(t) = args.threshold {
        base.threshold = t;
    }
    base.tokens = args.token.iter().map(|s| parse_token(s)).collect::<Result<_, _>>()?;
    let mut config: ServiceConfig = overlay(&base, file.service.as_ref(), "service")?;
    if let Some(d) = file.data_dir.clone() {
        config.data_dir = d;
    }
    if let Some(b) = file.bind {
        config.bind = b;
    }
    if let Some(b) = file.bundle.clone() {
        config.bundle = Some(b);
    }
    if let Some(c) = file.corpus.clone() {
        config.corpus = Some(c);
    }
    if let Some(t) = file.threshold {
        config.threshold = t;
    }
    if let Some(p) = file.train_percent {
        config.train_percent = p;
    }
    for p in config.bundle.iter().chain(config.corpus.iter()) {
        need_file(p)?;
    }
    let bind = config.bind;
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::internal)?;
    runtime.block_on(async move {
        let state = tokio::task::spawn_blocking(move || AppState::open(config))
            .await
            .map_err(CliError::internal)??;
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| CliError::user(format!("bind {bind}: {e}")))?;
        let addr = listener.local_addr().map_err(CliError::internal)?;
        print_json(json!({ "listening": addr.to_string() }));
        depscreen_service::serve(listener, state, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
