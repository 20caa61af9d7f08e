use depscreen_core::corpus::Label;
use depscreen_core::data::{synth_dataset, PreprocessConfig, Segment, SynthConfig};
use depscreen_core::encoder::{EncoderConfig, EncoderParams};
use depscreen_core::pipeline::{inputs_for, preprocess, pretrain, PipelineConfig, RawSession};
use depscreen_core::training::{pretrain_modality, separation, train_fusion, TrainConfig};
use depscreen_core::Tensor;

fn small_encoder(input_dim: usize) -> EncoderConfig {
    EncoderConfig {
        model_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        ffn_dim: 16,
        interpolation_factor: 2,
        embedding_dim: 8,
        ..EncoderConfig::new(input_dim)
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: epochs,
        fusion_epochs: epochs,
        pairs_per_epoch: Some(48),
        seed: 17,
        ..TrainConfig::default()
    }
}

fn preprocess_config() -> PreprocessConfig {
    PreprocessConfig {
        max_steps: 8,
        ..PreprocessConfig::default()
    }
}

fn sessions(n: usize, proportions: [f64; 4], seed: u64) -> Vec<RawSession> {
    let config = SynthConfig {
        n_sessions: n,
        class_proportions: proportions,
        participant_seconds: 330.0,
        seed,
        ..SynthConfig::default()
    };
    synth_dataset(&config).unwrap().into_iter().map(Into::into).collect()
}

fn visual_segments(sessions: &[RawSession]) -> Vec<Segment> {
    sessions
        .iter()
        .flat_map(|s| preprocess(s, &preprocess_config()).unwrap().visual)
        .collect()
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let segs = visual_segments(&sessions(12, [0.5, 0.5, 0.0, 0.0], 1));
    let enc = small_encoder(12);
    let out = pretrain_modality(&segs, &train_config(0), &enc).unwrap();
    assert!(out.history.is_empty());
    let fresh = EncoderParams::init(enc, train_config(0).seed ^ 1).unwrap();
    assert_eq!(out.encoder, fresh);
}

#[test]
fn pretraining_is_reproducible_and_improves() {
    let segs = visual_segments(&sessions(16, [0.5, 0.5, 0.0, 0.0], 2));
    let a = pretrain_modality(&segs, &train_config(6), &small_encoder(12)).unwrap();
    let b = pretrain_modality(&segs, &train_config(6), &small_encoder(12)).unwrap();
    assert_eq!(a.history.len(), 6);
    assert_eq!(a.history, b.history);
    assert_eq!(a.encoder, b.encoder);
    assert!(a.history.last().unwrap() <= a.history.first().unwrap());
}

#[test]
fn two_class_pretraining_separates_held_out_segments() {
    let train = visual_segments(&sessions(24, [0.5, 0.5, 0.0, 0.0], 3));
    let held_out = visual_segments(&sessions(12, [0.5, 0.5, 0.0, 0.0], 4));
    let out = pretrain_modality(&train, &train_config(8), &small_encoder(12)).unwrap();
    let emb: Vec<Vec<f64>> = held_out
        .iter()
        .map(|s| out.encoder.encode_segment(s).unwrap())
        .collect();
    let labels: Vec<Label> = held_out.iter().map(|s| s.label.unwrap()).collect();
    let sep = separation(&emb, &labels).unwrap();
    assert!(sep.mean_same_distance < sep.mean_cross_distance, "{sep:?}");
}

#[test]
fn constant_features_raise_a_warning() {
    let mut segs = visual_segments(&sessions(8, [0.5, 0.5, 0.0, 0.0], 5));
    for s in &mut segs {
        let d = s.frames.last_dim();
        let rows = s.frames.rows();
        s.frames = Tensor::new(vec![rows, d], vec![0.25; rows * d]).unwrap();
    }
    let out = pretrain_modality(&segs, &train_config(1), &small_encoder(12)).unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.warnings.iter().any(|w| w.contains("degenerate")));
}

#[test]
fn single_class_is_rejected() {
    let segs = visual_segments(&sessions(8, [1.0, 0.0, 0.0, 0.0], 6));
    assert!(pretrain_modality(&segs, &train_config(1), &small_encoder(12)).is_err());
}

fn pipeline_config(epochs: usize) -> PipelineConfig {
    PipelineConfig {
        encoder: small_encoder(1),
        fusion_hidden: 16,
        preprocess: preprocess_config(),
        train: train_config(epochs),
        ..PipelineConfig::default()
    }
}

#[test]
fn fusion_with_zero_epochs_wraps_pretrained_encoders() {
    let data = sessions(12, [0.25; 4], 7);
    let (bundle, report) = pretrain(&data, &pipeline_config(0)).unwrap();
    assert!(report.visual_history.is_empty());
    let inputs = inputs_for(&data, &bundle).unwrap();
    let out = train_fusion(bundle.clone(), &inputs, &train_config(0)).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.bundle.visual, bundle.visual);
    assert_eq!(out.bundle.audio, bundle.audio);
    assert_eq!(out.bundle.fusion, bundle.fusion);
    assert_eq!(out.bundle.version, bundle.version + 1);
    for s in &inputs {
        let e = out.bundle.embed_session(s).unwrap();
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn incomplete_sessions_are_excluded_and_counted() {
    let data = sessions(12, [0.25; 4], 8);
    let (bundle, _) = pretrain(&data, &pipeline_config(1)).unwrap();
    let mut inputs = inputs_for(&data, &bundle).unwrap();
    inputs[0].audio.clear();
    inputs[3].text.clear();
    let a = train_fusion(bundle.clone(), &inputs, &train_config(2)).unwrap();
    let b = train_fusion(bundle, &inputs, &train_config(2)).unwrap();
    assert_eq!(
        a.excluded,
        vec![inputs[0].session_id.clone(), inputs[3].session_id.clone()]
    );
    assert_eq!(a.bundle.metadata.excluded_sessions, 2);
    assert_eq!(a.history, b.history);
    assert_eq!(a.bundle, b.bundle);
    assert!(a.bundle.embed_session(&inputs[0]).is_err());
}
