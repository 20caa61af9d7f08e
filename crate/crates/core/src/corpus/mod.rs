//! Reference corpus of labelled exemplars and similarity-index
//! classification.

mod log;

pub use log::{CorpusChange, CorpusLog, CorpusRecord};

use std::cmp::Ordering;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Tolerance on unit norm for embeddings entering the corpus.
pub const UNIT_TOLERANCE: f64 = 1e-9;

pub const NUM_CLASSES: usize = 4;

/// Severity class 0 (none/minimal) to 3 (moderately severe or severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Label(u8);

impl Label {
    pub fn new(value: u8) -> Result<Self> {
        if usize::from(value) < NUM_CLASSES {
            Ok(Self(value))
        } else {
            Err(Error::InvalidLabel(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = Label> {
        (0..NUM_CLASSES as u8).map(Label)
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Label::new(v)
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Maps a PHQ-8 total to a severity class: 0–4 → 0, 5–9 → 1, 10–14 → 2,
/// 15–24 → 3.
pub fn phq8_to_label(score: u8) -> Result<Label> {
    match score {
        0..=4 => Ok(Label(0)),
        5..=9 => Ok(Label(1)),
        10..=14 => Ok(Label(2)),
        15..=24 => Ok(Label(3)),
        _ => Err(Error::invalid(format!("PHQ-8 score {score} outside 0..=24"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SeedCorpus,
    ClinicianAdded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub label: Label,
    /// Transcript excerpt shown next to the query during review.
    pub excerpt: String,
    pub provenance: Provenance,
    pub added_at: DateTime<Utc>,
    /// Session the exemplar was taken from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

/// Similarity threshold below which classification abstains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBoundary {
    threshold: f64,
}

impl ClassBoundary {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(Error::invalid(format!("threshold {threshold} outside [-1, 1]")));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Default for ClassBoundary {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("zero-norm or non-finite embedding"));
    }
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("embedding norm {n} is not 1")));
    }
    Ok(())
}

/// Cosine similarity of two unit vectors (their dot product), clamped to
/// `[-1, 1]`.
pub fn similarity_index(q: &[f64], r: &[f64]) -> Result<f64> {
    if q.len() != r.len() {
        return Err(Error::Dimension {
            expected: q.len(),
            found: r.len(),
        });
    }
    check_unit(q)?;
    check_unit(r)?;
    Ok(dot(q, r).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `None` when the top similarity falls below the class boundary.
    pub label: Option<Label>,
    pub uncertain: bool,
    /// Best similarity per class, indexed by label.
    pub class_scores: [f64; NUM_CLASSES],
    /// Exemplar achieving each class score.
    pub nearest: [u64; NUM_CLASSES],
    pub top_similarity: f64,
}

impl Prediction {
    /// Class with the highest score, ties going to the more severe class.
    pub fn argmax(&self) -> Label {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.class_scores[k] >= self.class_scores[best] {
                best = k;
            }
        }
        Label(best as u8)
    }
}

/// Versioned, append-only collection of exemplars.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCorpus {
    exemplars: Vec<Exemplar>,
    version: u64,
    next_id: u64,
}

impl ReferenceCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Exemplar> {
        self.exemplars.iter().find(|e| e.id == id)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for e in &self.exemplars {
            counts[e.label.index()] += 1;
        }
        counts
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.exemplars.first().map(|e| e.embedding.len())
    }

    /// Adds an exemplar and bumps the version. Conflicting duplicates are
    /// kept side by side.
    pub fn add_exemplar(
        &mut self,
        embedding: Vec<f64>,
        label: Label,
        excerpt: impl Into<String>,
        provenance: Provenance,
        session_id: Option<String>,
        added_at: DateTime<Utc>,
    ) -> Result<&Exemplar> {
        check_unit(&embedding)?;
        if let Some(d) = self.embedding_dim() {
            if d != embedding.len() {
                return Err(Error::Dimension {
                    expected: d,
                    found: embedding.len(),
                });
            }
        }
        let exemplar = Exemplar {
            id: self.next_id,
            embedding,
            label,
            excerpt: excerpt.into(),
            provenance,
            added_at,
            session_id,
        };
        self.insert(exemplar)?;
        Ok(self.exemplars.last().expect("just pushed"))
    }

    /// Inserts a fully formed exemplar (log replay path).
    pub(crate) fn insert(&mut self, exemplar: Exemplar) -> Result<()> {
        if self.exemplars.iter().any(|e| e.id == exemplar.id) {
            return Err(Error::invalid(format!("duplicate exemplar id {}", exemplar.id)));
        }
        self.next_id = self.next_id.max(exemplar.id + 1);
        self.exemplars.push(exemplar);
        self.version += 1;
        Ok(())
    }

    /// Replaces embeddings of existing exemplars, e.g. after the model that
    /// produced them was retrained. Bumps the version once.
    pub fn reembed(&mut self, updates: &[(u64, Vec<f64>)]) -> Result<()> {
        for (id, emb) in updates {
            check_unit(emb)?;
            if self.get(*id).is_none() {
                return Err(Error::invalid(format!("unknown exemplar {id}")));
            }
        }
        for (id, emb) in updates {
            if let Some(e) = self.exemplars.iter_mut().find(|e| e.id == *id) {
                e.embedding = emb.clone();
            }
        }
        self.version += 1;
        Ok(())
    }
}

/// Scores `q` against every exemplar: the class score is the best
/// similarity among that class's exemplars, the label is the argmax, and
/// the label is withheld when the top score is below the boundary.
pub fn classify(q: &[f64], corpus: &ReferenceCorpus, boundary: ClassBoundary) -> Result<Prediction> {
    check_unit(q)?;
    let mut scores = [f64::NEG_INFINITY; NUM_CLASSES];
    let mut nearest = [0u64; NUM_CLASSES];
    for e in &corpus.exemplars {
        let s = similarity_index(q, &e.embedding)?;
        let k = e.label.index();
        // First exemplar wins among equal scores, so duplicates are inert.
        if s > scores[k] {
            scores[k] = s;
            nearest[k] = e.id;
        }
    }
    if let Some(k) = scores.iter().position(|s| *s == f64::NEG_INFINITY) {
        return Err(Error::EmptyClass(k as u8));
    }
    let mut p = Prediction {
        label: None,
        uncertain: false,
        class_scores: scores,
        nearest,
        top_similarity: 0.0,
    };
    let best = p.argmax();
    p.top_similarity = scores[best.index()];
    if p.top_similarity >= boundary.threshold() {
        p.label = Some(best);
    } else {
        p.uncertain = true;
    }
    Ok(p)
}

/// Consultation order: uncertain sessions first (they need review), then by
/// severity descending, then by top similarity descending, then by id.
pub fn triage_rank<S: AsRef<str> + Clone>(predictions: &[(S, Prediction)]) -> Vec<(S, Prediction)> {
    let mut out = predictions.to_vec();
    out.sort_by(|(ia, a), (ib, b)| {
        let rank = |p: &Prediction| {
            if p.uncertain {
                NUM_CLASSES as i32
            } else {
                p.label.map_or(-1, |l| i32::from(l.0))
            }
        };
        rank(b)
            .cmp(&rank(a))
            .then_with(|| {
                b.top_similarity
                    .partial_cmp(&a.top_similarity)
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| ia.as_ref().cmp(ib.as_ref()))
    });
    out
}
