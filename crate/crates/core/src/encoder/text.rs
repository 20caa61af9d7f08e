use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMode {
    PrecomputedFile,
    ToyHashedNgram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEmbedderSpec {
    pub mode: TextMode,
    pub dimension: usize,
    /// Hash buckets for the toy embedder.
    pub buckets: usize,
    pub seed: u64,
}

impl Default for TextEmbedderSpec {
    fn default() -> Self {
        Self {
            mode: TextMode::PrecomputedFile,
            dimension: 64,
            buckets: 1024,
            seed: 0x5eed,
        }
    }
}

/// Precomputed sentence embeddings keyed by session or segment id.
///
/// File format: UTF-8, one record per line, `key<TAB>v1,v2,…,vd`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    rows: BTreeMap<String, Vec<f64>>,
    dimension: Option<usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let key = key.into();
        if key.is_empty() || key.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("invalid embedding key {key:?}")));
        }
        match self.dimension {
            Some(d) if d != values.len() => {
                return Err(Error::Dimension {
                    expected: d,
                    found: values.len(),
                })
            }
            None => self.dimension = Some(values.len()),
            _ => {}
        }
        self.rows.insert(key, values);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| err("expected key<TAB>values".into()))?;
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| err(format!("bad value {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            table.insert(key, values).map_err(|e| err(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Serialises with shortest round-trip float formatting, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.rows {
            out.push_str(k);
            out.push('\t');
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{x:?}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub enum TextInput<'a> {
    /// Cleaned transcript text, for the toy embedder.
    Text(&'a str),
    /// Lookup key into the precomputed table.
    Key(&'a str),
}

/// Source of unit-norm text embeddings. Text embeddings are inputs to
/// fusion and carry no trainable parameters.
#[derive(Debug, Clone)]
pub enum TextEmbedder {
    Precomputed {
        table: EmbeddingTable,
        dimension: usize,
    },
    Toy {
        spec: TextEmbedderSpec,
        projection: Vec<f64>,
    },
}

impl TextEmbedder {
    pub fn precomputed(table: EmbeddingTable, dimension: usize) -> Result<Self> {
        if let Some(d) = table.dimension() {
            if d != dimension {
                return Err(Error::Dimension {
                    expected: dimension,
                    found: d,
                });
            }
        }
        Ok(Self::Precomputed { table, dimension })
    }

    pub fn toy(spec: TextEmbedderSpec) -> Result<Self> {
        if spec.dimension == 0 || spec.buckets == 0 {
            return Err(Error::invalid("toy embedder needs dimension and buckets >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let projection = (0..spec.buckets * spec.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self::Toy { spec, projection })
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Precomputed { dimension, .. } => *dimension,
            Self::Toy { spec, .. } => spec.dimension,
        }
    }

    pub fn embed(&self, input: TextInput<'_>) -> Result<Vec<f64>> {
        let raw = match (self, input) {
            (Self::Precomputed { table, .. }, TextInput::Key(key)) => table
                .get(key)
                .ok_or_else(|| Error::MissingKey(key.to_string()))?
                .to_vec(),
            (Self::Toy { spec, projection }, TextInput::Text(text)) => {
                let tokens: Vec<&str> = text.split_whitespace().collect();
                if tokens.is_empty() {
                    return Err(Error::invalid("cannot embed empty text"));
                }
                let mut counts = vec![0.0; spec.buckets];
                for t in &tokens {
                    counts[(fnv1a(t.as_bytes()) % spec.buckets as u64) as usize] += 1.0;
                }
                for pair in tokens.windows(2) {
                    let bigram = format!("{} {}", pair[0], pair[1]);
                    counts[(fnv1a(bigram.as_bytes()) % spec.buckets as u64) as usize] += 1.0;
                }
                let d = spec.dimension;
                let mut out = vec![0.0; d];
                for (b, c) in counts.iter().enumerate().filter(|(_, c)| **c != 0.0) {
                    for (o, w) in out.iter_mut().zip(&projection[b * d..(b + 1) * d]) {
                        *o += c * w;
                    }
                }
                out
            }
            (Self::Precomputed { .. }, TextInput::Text(_)) => {
                return Err(Error::invalid("precomputed text embedder needs a key"))
            }
            (Self::Toy { .. }, TextInput::Key(_)) => return Err(Error::invalid("toy text embedder needs text")),
        };
        let n = norm(&raw);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::NonFinite("text embedding normalisation"));
        }
        Ok(raw.into_iter().map(|x| x / n).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
