//! Contrastive siamese training: per-modality encoder pretraining and
//! end-to-end fusion training with the same pairwise loss.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, NUM_CLASSES};
use crate::data::Segment;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, SessionInputs};
use crate::tensor::{Adam, AdamConfig, GradientMap, ParamId, Tape, Tensor, Var};

/// Euclidean distance between two embeddings.
pub fn pairwise_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// 0 for a same-class pair, 1 otherwise.
pub fn class_indicator(a: Label, b: Label) -> u8 {
    u8::from(a != b)
}

/// `½(1−c)·D² + ½·c·max(0, m − D)²`.
pub fn contrastive_loss(a: &[f64], b: &[f64], c: u8, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    if c > 1 {
        return Err(Error::invalid(format!("indicator must be 0 or 1, got {c}")));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("contrastive_loss"));
    }
    let d = pairwise_distance(a, b)?;
    Ok(if c == 0 {
        0.5 * d * d
    } else {
        let h = (margin - d).max(0.0);
        0.5 * h * h
    })
}

/// Records the contrastive loss of two `1 × E` embeddings on `tape`.
pub fn contrastive_loss_var(tape: &mut Tape, a: Var, b: Var, c: u8, margin: f64) -> Result<Var> {
    check_margin(margin)?;
    let diff = tape.sub(a, b)?;
    match c {
        0 => {
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(sq)?;
            tape.scale(s, 0.5)
        }
        1 => {
            let d = tape.l2_norm(diff)?;
            let neg = tape.scale(d, -1.0)?;
            let m = tape.constant(Tensor::scalar(margin));
            let gap = tape.add(neg, m)?;
            let hinge = tape.relu(gap)?;
            let sq = tape.mul(hinge, hinge)?;
            tape.scale(sq, 0.5)
        }
        _ => Err(Error::invalid(format!("indicator must be 0 or 1, got {c}"))),
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("margin must be positive, got {margin}")))
    }
}

/// Indices into the item list the pair was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub left: usize,
    pub right: usize,
    pub indicator: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub pretrain_epochs: usize,
    pub fusion_epochs: usize,
    pub batch_size: usize,
    /// Pairs sampled per epoch; `None` means 4 × item count.
    pub pairs_per_epoch: Option<usize>,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            pretrain_epochs: 30,
            fusion_epochs: 30,
            batch_size: 16,
            pairs_per_epoch: None,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin)?;
        if self.margin > 2.0 {
            return Err(Error::invalid("margin above 2 is unreachable for unit embeddings"));
        }
        if self.batch_size == 0 || self.pairs_per_epoch == Some(0) {
            return Err(Error::invalid("batch size and pairs per epoch must be >= 1"));
        }
        Ok(())
    }

    fn pairs_for(&self, items: usize) -> usize {
        self.pairs_per_epoch.unwrap_or(4 * items)
    }
}

/// Samples `n` pairs, half same-class (rounded down) and half cross-class.
/// Same-class pairs pick a class with at least two items uniformly, then two
/// distinct items; cross-class pairs pick an unordered pair of present
/// classes uniformly. If no class has two items, same-class pairs are
/// self-pairs.
pub fn sample_pairs(labels: &[Label], n: usize, seed: u64) -> Result<Vec<Pair>> {
    if labels.len() < 2 {
        return Err(Error::invalid("pair sampling needs at least two items"));
    }
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::invalid("pair sampling needs at least two classes"));
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let multi: Vec<&Vec<usize>> = classes.iter().copied().filter(|c| c.len() >= 2).collect();
    let mut class_pairs = Vec::new();
    for a in 0..classes.len() {
        for b in a + 1..classes.len() {
            class_pairs.push((a, b));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_same = n / 2;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_same {
        let pair = if let Some(members) = multi.choose(&mut rng) {
            let i = rng.random_range(0..members.len());
            let mut j = rng.random_range(0..members.len() - 1);
            if j >= i {
                j += 1;
            }
            (members[i], members[j])
        } else {
            let i = rng.random_range(0..labels.len());
            (i, i)
        };
        out.push(Pair {
            left: pair.0,
            right: pair.1,
            indicator: 0,
        });
    }
    for _ in n_same..n {
        let &(a, b) = class_pairs.choose(&mut rng).expect("two classes present");
        let left = *classes[a].choose(&mut rng).expect("non-empty class");
        let right = *classes[b].choose(&mut rng).expect("non-empty class");
        out.push(Pair {
            left,
            right,
            indicator: 1,
        });
    }
    Ok(out)
}

/// Something trainable on pairs of its items.
trait PairObjective {
    fn labels(&self) -> Vec<Label>;
    fn register(&self, tape: &mut Tape) -> Vec<Var>;
    fn pair_loss(&self, tape: &mut Tape, vars: &[Var], pair: &Pair, margin: f64) -> Result<Var>;
    fn params_with_ids(&mut self) -> Vec<(ParamId, &mut Tensor)>;
}

fn epoch_seed(seed: u64, stage: u64, epoch: usize) -> u64 {
    seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn accumulate(total: &mut GradientMap, grads: GradientMap) -> Result<()> {
    for (id, g) in grads {
        match total.get_mut(&id) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(id, g);
            }
        }
    }
    Ok(())
}

/// Runs `epochs` of minibatch Adam on freshly sampled pairs and returns the
/// mean pair loss of each epoch.
fn fit<O: PairObjective>(objective: &mut O, config: &TrainConfig, epochs: usize, stage: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let labels = objective.labels();
    let n_pairs = config.pairs_for(labels.len());
    let mut adam = Adam::new(config.optimizer);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let pairs = sample_pairs(&labels, n_pairs, epoch_seed(config.seed, stage, epoch))?;
        let mut epoch_loss = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let mut total = GradientMap::new();
            for pair in batch {
                let mut tape = Tape::new();
                let vars = objective.register(&mut tape);
                let loss = objective.pair_loss(&mut tape, &vars, pair, config.margin)?;
                epoch_loss += tape.value(loss).item()?;
                accumulate(&mut total, tape.backward(loss)?)?;
            }
            let inv = 1.0 / batch.len() as f64;
            for g in total.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam.step(&mut objective.params_with_ids(), &total)?;
        }
        let mean = epoch_loss / pairs.len() as f64;
        log::debug!("stage {stage} epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

struct ModalityObjective<'a> {
    encoder: EncoderParams,
    segments: &'a [Segment],
    labels: Vec<Label>,
}

impl PairObjective for ModalityObjective<'_> {
    fn labels(&self) -> Vec<Label> {
        self.labels.clone()
    }

    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.encoder.register(tape, 0)
    }

    fn pair_loss(&self, tape: &mut Tape, vars: &[Var], pair: &Pair, margin: f64) -> Result<Var> {
        let a = self.encoder.forward(tape, vars, &self.segments[pair.left].frames)?;
        let b = self.encoder.forward(tape, vars, &self.segments[pair.right].frames)?;
        contrastive_loss_var(tape, a, b, pair.indicator, margin)
    }

    fn params_with_ids(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        self.encoder.params_mut().with_ids(0)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    /// Mean pair loss per epoch.
    pub history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Names features that never vary across all frames of all segments.
fn constant_features(segments: &[Segment]) -> Vec<usize> {
    let d = segments[0].frames.last_dim();
    (0..d)
        .filter(|&j| {
            let mut values = segments
                .iter()
                .flat_map(|s| s.frames.data().iter().skip(j).step_by(d).copied());
            let first = values.next();
            values.all(|v| Some(v) == first)
        })
        .collect()
}

/// Siamese pretraining of one modality encoder on labelled segments.
pub fn pretrain_modality(
    segments: &[Segment],
    config: &TrainConfig,
    enc_config: &EncoderConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let labels = segments
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::invalid(format!("segment of {} has no label", s.session_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.iter().all(|l| Some(l) == labels.first()) {
        return Err(Error::invalid("pretraining needs segments from at least two classes"));
    }
    if let Some(s) = segments.iter().find(|s| s.frames.last_dim() != enc_config.input_dim) {
        return Err(Error::Dimension {
            expected: enc_config.input_dim,
            found: s.frames.last_dim(),
        });
    }
    let mut warnings = Vec::new();
    let constant = constant_features(segments);
    if !constant.is_empty() {
        let msg = if constant.len() == enc_config.input_dim {
            "degenerate data: every feature is constant".to_string()
        } else {
            format!("constant features {constant:?}")
        };
        warn!("{}: {msg}", segments[0].modality);
        warnings.push(msg);
    }
    let stage = match segments[0].modality {
        crate::data::Modality::Visual => 1,
        crate::data::Modality::Audio => 2,
    };
    let mut objective = ModalityObjective {
        encoder: EncoderParams::init(*enc_config, config.seed ^ stage)?,
        segments,
        labels,
    };
    let history = fit(&mut objective, config, config.pretrain_epochs, stage)?;
    Ok(PretrainOutcome {
        encoder: objective.encoder,
        history,
        warnings,
    })
}

struct FusionObjective<'a> {
    bundle: ModelBundle,
    sessions: Vec<&'a SessionInputs>,
}

impl PairObjective for FusionObjective<'_> {
    fn labels(&self) -> Vec<Label> {
        self.sessions.iter().map(|s| s.label.expect("filtered")).collect()
    }

    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.bundle.register(tape)
    }

    fn pair_loss(&self, tape: &mut Tape, vars: &[Var], pair: &Pair, margin: f64) -> Result<Var> {
        let a = self.bundle.forward(tape, vars, self.sessions[pair.left])?;
        let b = self.bundle.forward(tape, vars, self.sessions[pair.right])?;
        contrastive_loss_var(tape, a, b, pair.indicator, margin)
    }

    fn params_with_ids(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        self.bundle.params_with_ids()
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<f64>,
    /// Sessions skipped for a missing modality or label.
    pub excluded: Vec<String>,
}

/// End-to-end training of encoders and fusion network on session pairs.
/// Returns the bundle with its version incremented.
pub fn train_fusion(bundle: ModelBundle, sessions: &[SessionInputs], config: &TrainConfig) -> Result<FusionOutcome> {
    config.validate()?;
    let (usable, excluded): (Vec<&SessionInputs>, Vec<&SessionInputs>) =
        sessions.iter().partition(|s| s.is_complete() && s.label.is_some());
    let excluded: Vec<String> = excluded.iter().map(|s| s.session_id.clone()).collect();
    if !excluded.is_empty() {
        warn!("fusion training excludes {} incomplete sessions", excluded.len());
    }
    let mut classes = [false; NUM_CLASSES];
    for s in &usable {
        classes[s.label.expect("filtered").index()] = true;
    }
    if classes.iter().filter(|c| **c).count() < 2 {
        return Err(Error::invalid(
            "fusion training needs labelled sessions from at least two classes",
        ));
    }
    let mut objective = FusionObjective {
        bundle,
        sessions: usable,
    };
    let history = fit(&mut objective, config, config.fusion_epochs, 3)?;
    let mut bundle = objective.bundle;
    bundle.version += 1;
    bundle.train = *config;
    bundle.metadata.seed = config.seed;
    bundle.metadata.fusion_epochs = config.fusion_epochs;
    bundle.metadata.final_loss = history.last().copied().or(bundle.metadata.final_loss);
    bundle.metadata.excluded_sessions = excluded.len();
    Ok(FusionOutcome {
        bundle,
        history,
        excluded,
    })
}

/// Same-class versus cross-class statistics of a labelled embedding set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub mean_same_distance: f64,
    pub mean_cross_distance: f64,
    /// Probability that a random same-class pair is more similar than a
    /// random cross-class pair (ties count half).
    pub ordering: f64,
}

pub fn separation(embeddings: &[Vec<f64>], labels: &[Label]) -> Result<Separation> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("embedding and label counts differ"));
    }
    let mut same = Vec::new();
    let mut cross = Vec::new();
    let (mut ds, mut dc) = (0.0, 0.0);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d = pairwise_distance(&embeddings[i], &embeddings[j])?;
            let cos = crate::tensor::dot(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                ds += d;
                same.push(cos);
            } else {
                dc += d;
                cross.push(cos);
            }
        }
    }
    if same.is_empty() || cross.is_empty() {
        return Err(Error::invalid("need both same-class and cross-class pairs"));
    }
    let scores: Vec<f64> = same.iter().chain(&cross).copied().collect();
    let positive: Vec<bool> = (0..scores.len()).map(|i| i < same.len()).collect();
    Ok(Separation {
        mean_same_distance: ds / same.len() as f64,
        mean_cross_distance: dc / cross.len() as f64,
        ordering: crate::metrics::rank_auc(&scores, &positive)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(v: u8) -> Label {
        Label::new(v).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(pairwise_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let d = pairwise_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert!(pairwise_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(class_indicator(l(2), l(2)), 0);
        assert_eq!(class_indicator(l(0), l(3)), 1);
        for a in Label::all() {
            for b in Label::all() {
                assert_eq!(class_indicator(a, b), class_indicator(b, a));
            }
        }
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let a = [0.3, -0.2, 0.9];
        let b = [0.1, 0.4, 0.5];
        for c in [0, 1] {
            for m in [0.2, 1.0, 1.5] {
                let mut tape = Tape::new();
                let va = tape.constant(Tensor::row(a.to_vec()).unwrap());
                let vb = tape.constant(Tensor::row(b.to_vec()).unwrap());
                let loss = contrastive_loss_var(&mut tape, va, vb, c, m).unwrap();
                let want = contrastive_loss(&a, &b, c, m).unwrap();
                assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampling_is_balanced_and_deterministic() {
        let labels: Vec<Label> = [0, 0, 1, 1, 2, 3, 3].iter().map(|&v| l(v)).collect();
        let pairs = sample_pairs(&labels, 10, 7).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.indicator == 0).count(), 5);
        assert_eq!(pairs, sample_pairs(&labels, 10, 7).unwrap());
        for p in &pairs {
            assert_eq!(p.indicator, class_indicator(labels[p.left], labels[p.right]));
            if p.indicator == 0 {
                assert_ne!(p.left, p.right);
            }
        }
        assert!(sample_pairs(&[l(1), l(1), l(1)], 4, 0).is_err());
        assert!(sample_pairs(&[l(1)], 4, 0).is_err());
    }

    #[test]
    fn singleton_classes_fall_back_to_self_pairs() {
        let pairs = sample_pairs(&[l(0), l(2)], 4, 1).unwrap();
        for p in pairs.iter().filter(|p| p.indicator == 0) {
            assert_eq!(p.left, p.right);
        }
    }

    #[test]
    fn config_rejects_bad_margin() {
        let mut c = TrainConfig::default();
        c.margin = 0.0;
        assert!(c.validate().is_err());
        c.margin = 2.5;
        assert!(c.validate().is_err());
    }
}
