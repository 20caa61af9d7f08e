//! Seeded synthetic sessions in the same on-disk formats as real ingestion.
//!
//! Each class `k` has a mean vector per modality; frames follow an order-1
//! autoregressive process around the subject's mean (class mean plus a
//! per-subject offset). Interviewer turns are filled with class-free noise so
//! that scrubbing matters. Text embeddings are drawn near a per-class
//! centroid, and transcripts are built from per-class phrase pools for the
//! toy embedder.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::DATASET_INDEX;
use super::{
    write_feature_csv, write_transcript, Dataset, FeatureMatrix, Modality, SessionManifest, Speaker, TranscriptTurn,
};
use crate::corpus::Label;
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sessions: usize,
    pub class_proportions: [f64; 4],
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub visual_rate_hz: f64,
    pub audio_rate_hz: f64,
    /// Approximate participant speaking time per session, in seconds.
    pub participant_seconds: f64,
    /// Scale of the class mean vectors; 0 makes classes indistinguishable.
    pub separation: f64,
    pub noise: f64,
    pub ar_coefficient: f64,
    /// Standard deviation of the per-subject offset from the class mean.
    pub subject_spread: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sessions: 200,
            class_proportions: [0.55, 0.20, 0.15, 0.10],
            visual_dim: 12,
            audio_dim: 8,
            text_dim: 64,
            visual_rate_hz: 1.0,
            audio_rate_hz: 2.0,
            participant_seconds: 660.0,
            separation: 1.0,
            noise: 1.0,
            ar_coefficient: 0.7,
            subject_spread: 0.3,
            text_noise: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sessions < 8 {
            return Err(Error::invalid("synthetic dataset needs at least 8 sessions"));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "class proportions must be non-negative and sum to 1, got {:?}",
                self.class_proportions
            )));
        }
        if !(self.separation > 0.0) {
            return Err(Error::invalid(
                "class-mean separation must be positive; identical classes are untrainable",
            ));
        }
        if self.visual_dim == 0 || self.audio_dim == 0 || self.text_dim == 0 {
            return Err(Error::invalid("feature dimensions must be >= 1"));
        }
        if !(self.visual_rate_hz > 0.0 && self.audio_rate_hz > 0.0) {
            return Err(Error::invalid("frame rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::invalid("autoregressive coefficient must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `proportions`; ties in
/// the remainder go to the lower class index.
pub fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct SynthSession {
    pub manifest: SessionManifest,
    pub label: Label,
    pub visual: FeatureMatrix,
    pub audio: FeatureMatrix,
    pub transcript: Vec<TranscriptTurn>,
    pub text_embedding: Vec<f64>,
}

const PHRASES: [&[&str]; 4] = [
    &[
        "i have been feeling pretty good lately",
        "i sleep well most nights",
        "work is going fine and i enjoy my hobbies",
        "i like spending time with my friends",
        "things are calm and i feel rested",
    ],
    &[
        "sometimes i feel a bit down",
        "my sleep has been a little off",
        "i get tired more than usual",
        "i still enjoy some things but less",
        "now and then i worry about work",
    ],
    &[
        "i often feel down and tired",
        "it is hard to concentrate at work",
        "i have trouble sleeping most nights",
        "i do not enjoy things like before",
        "i feel restless and on edge a lot",
    ],
    &[
        "i feel hopeless nearly every day",
        "i can barely get out of bed",
        "i have no energy for anything at all",
        "i feel like a failure and a burden",
        "nothing seems worth doing anymore",
    ],
];

const QUESTIONS: &[&str] = &[
    "how are you doing today",
    "how have you been sleeping",
    "tell me about your work",
    "what do you do to relax",
    "when did you last feel really happy",
];

const PHQ8_BANDS: [(u8, u8); 4] = [(0, 4), (5, 9), (10, 14), (15, 24)];

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct ClassModel {
    visual_means: Vec<Vec<f64>>,
    audio_means: Vec<Vec<f64>>,
    text_centroids: Vec<Vec<f64>>,
}

impl ClassModel {
    fn new(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00c1_a55e_5000_0000);
        let mut means = |d: usize| -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| {
                    gaussian_vec(&mut rng, d)
                        .into_iter()
                        .map(|x| x * config.separation)
                        .collect()
                })
                .collect()
        };
        let visual_means = means(config.visual_dim);
        let audio_means = means(config.audio_dim);
        let text_centroids = (0..4)
            .map(|_| {
                let v = gaussian_vec(&mut rng, config.text_dim);
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Self {
            visual_means,
            audio_means,
            text_centroids,
        }
    }
}

/// Generates `config.n_sessions` labelled sessions, deterministically in
/// `config.seed`.
pub fn synth_dataset(config: &SynthConfig) -> Result<Vec<SynthSession>> {
    config.validate()?;
    let model = ClassModel::new(config);
    let counts = apportion(config.n_sessions, &config.class_proportions);
    let mut labels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k as u8, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    labels.shuffle(&mut rng);

    labels
        .iter()
        .enumerate()
        .map(|(i, &k)| synth_session(config, &model, i, Label::new(k)?))
        .collect()
}

fn synth_session(config: &SynthConfig, model: &ClassModel, index: usize, label: Label) -> Result<SynthSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let k = label.index();
    let session_id = format!("s{index:04}");

    // Alternating interviewer / participant turns.
    let mut transcript = Vec::new();
    let mut t = 0.0;
    let mut spoken = 0.0;
    while spoken < config.participant_seconds {
        let q_len = rng.random_range(4.0..12.0);
        transcript.push(TranscriptTurn {
            speaker: Speaker::Interviewer,
            start: round_ms(t),
            stop: round_ms(t + q_len),
            text: QUESTIONS.choose(&mut rng).expect("non-empty").to_string(),
        });
        t = round_ms(t + q_len) + 0.5;
        let a_len = rng.random_range(30.0..80.0);
        let mut text = String::new();
        for _ in 0..rng.random_range(1..=2) {
            if !text.is_empty() {
                text.push_str(". ");
            }
            text.push_str(PHRASES[k].choose(&mut rng).expect("non-empty"));
        }
        if rng.random_bool(0.3) {
            text.push_str(" <laughter>");
        }
        transcript.push(TranscriptTurn {
            speaker: Speaker::Participant,
            start: round_ms(t),
            stop: round_ms(t + a_len),
            text,
        });
        t = round_ms(t + a_len) + 0.5;
        spoken += a_len;
    }
    let duration = t;
    let interviewer: Vec<(f64, f64)> = transcript
        .iter()
        .filter(|t| t.speaker == Speaker::Interviewer)
        .map(|t| (t.start, t.stop))
        .collect();

    let spread = config.subject_spread;
    let mut stream = |modality: Modality, means: &[f64], rate: f64| -> Result<FeatureMatrix> {
        let d = means.len();
        let subject: Vec<f64> = means
            .iter()
            .map(|m| m + spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let phi = config.ar_coefficient;
        let innovation = config.noise * (1.0 - phi * phi).sqrt();
        let n = (duration * rate).floor() as usize;
        let mut times = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * d);
        let mut state = vec![0.0; d];
        for i in 0..n {
            // Round so the written CSV reproduces the same timestamps.
            let ti = round_us(i as f64 / rate);
            let in_question = interviewer.iter().any(|&(a, b)| ti >= a && ti < b);
            for j in 0..d {
                let eps: f64 = StandardNormal.sample(&mut rng);
                state[j] = phi * state[j] + innovation * eps;
                let centre = if in_question { 0.0 } else { subject[j] };
                values.push(round_us(centre + state[j]));
            }
            times.push(ti);
        }
        let names = (0..d).map(|j| format!("f{j}")).collect();
        FeatureMatrix::new(modality, rate, times, values, names)
    };
    let visual = stream(Modality::Visual, &model.visual_means[k], config.visual_rate_hz)?;
    let audio = stream(Modality::Audio, &model.audio_means[k], config.audio_rate_hz)?;

    let noisy: Vec<f64> = model.text_centroids[k]
        .iter()
        .map(|c| c + config.text_noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let n = norm(&noisy);
    let text_embedding = noisy.into_iter().map(|x| x / n).collect();

    let (lo, hi) = PHQ8_BANDS[k];
    let phq8 = rng.random_range(lo..=hi);

    Ok(SynthSession {
        manifest: SessionManifest {
            session_id,
            visual: "visual.csv".into(),
            audio: "audio.csv".into(),
            transcript: "transcript.tsv".into(),
            text_embedding: Some("../../text_embeddings.tsv".into()),
            phq8: Some(phq8),
            visual_rate_hz: Some(config.visual_rate_hz),
            audio_rate_hz: Some(config.audio_rate_hz),
        },
        label,
        visual,
        audio,
        transcript,
        text_embedding,
    })
}

fn round_ms(x: f64) -> f64 {
    (x * 1e3).round() / 1e3
}

fn round_us(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Writes `dataset.json`, `text_embeddings.tsv` and one directory per
/// session under `dir`.
pub fn write_dataset(dir: &Path, config: &SynthConfig, sessions: &[SynthSession]) -> Result<Dataset> {
    let sessions_dir = dir.join("sessions");
    fs::create_dir_all(&sessions_dir).map_err(|e| Error::io(&sessions_dir, e))?;
    let mut table = EmbeddingTable::new();
    let mut index = Vec::with_capacity(sessions.len());
    for s in sessions {
        let id = &s.manifest.session_id;
        let sdir = sessions_dir.join(id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write_feature_csv(&s.visual, &sdir.join("visual.csv"))?;
        write_feature_csv(&s.audio, &sdir.join("audio.csv"))?;
        write_transcript(&s.transcript, &sdir.join("transcript.tsv"))?;
        let mpath = sdir.join("manifest.json");
        let json = serde_json::to_string_pretty(&s.manifest)? + "\n";
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        table.insert(id.clone(), s.text_embedding.clone())?;
        index.push(PathBuf::from("sessions").join(id).join("manifest.json"));
    }
    table.save(&dir.join("text_embeddings.tsv"))?;
    let dataset = Dataset {
        visual_dim: config.visual_dim,
        audio_dim: config.audio_dim,
        text_dim: config.text_dim,
        sessions: index,
    };
    let ipath = dir.join(DATASET_INDEX);
    let json = serde_json::to_string_pretty(&dataset)? + "\n";
    fs::write(&ipath, json).map_err(|e| Error::io(&ipath, e))?;
    let cpath = dir.join("synth_config.json");
    let json = serde_json::to_string_pretty(config)? + "\n";
    fs::write(&cpath, json).map_err(|e| Error::io(&cpath, e))?;
    Ok(dataset)
}
