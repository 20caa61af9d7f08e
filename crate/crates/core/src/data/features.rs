use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        })
    }
}

/// Per-timestep feature vectors for one modality of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub rate_hz: f64,
    /// Timestamp of each row, in seconds.
    pub times: Vec<f64>,
    /// Row-major `T × d`.
    pub values: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(
        modality: Modality,
        rate_hz: f64,
        times: Vec<f64>,
        values: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 {
            return Err(Error::invalid("feature matrix needs at least one feature"));
        }
        if times.len() * d != values.len() {
            return Err(Error::invalid(format!(
                "{} timestamps and {} values do not form a {}-column matrix",
                times.len(),
                values.len(),
                d
            )));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::invalid(format!("rate must be positive, got {rate_hz}")));
        }
        if values.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self {
            modality,
            rate_hz,
            times,
            values,
            feature_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    /// Duration represented by the rows, `T / rate`.
    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.rate_hz
    }

    /// Drops every row whose timestamp falls inside one of the half-open
    /// ranges `[start, stop)`.
    pub fn without_ranges(&self, ranges: &[(f64, f64)]) -> FeatureMatrix {
        let d = self.dim();
        let mut times = Vec::with_capacity(self.len());
        let mut values = Vec::with_capacity(self.values.len());
        for (i, &t) in self.times.iter().enumerate() {
            if ranges.iter().any(|&(a, b)| t >= a && t < b) {
                continue;
            }
            times.push(t);
            values.extend_from_slice(&self.values[i * d..(i + 1) * d]);
        }
        FeatureMatrix {
            modality: self.modality,
            rate_hz: self.rate_hz,
            times,
            values,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Reads a feature CSV with header `t,f0..f{d-1}`. The sampling rate is
/// taken from `rate_hz` when given, otherwise from the median spacing of the
/// timestamps.
pub fn load_feature_csv(
    path: &Path,
    modality: Modality,
    expected_dim: usize,
    rate_hz: Option<f64>,
) -> Result<FeatureMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text, path, modality, expected_dim, rate_hz)
}

pub fn parse_feature_csv(
    text: &str,
    path: &Path,
    modality: Modality,
    expected_dim: usize,
    rate_hz: Option<f64>,
) -> Result<FeatureMatrix> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.get(0) != Some("t") {
        return Err(err(1, "first column must be `t`".into()));
    }
    let dim = header.len() - 1;
    if dim != expected_dim {
        return Err(err(
            1,
            format!("header declares {dim} features, expected {expected_dim}"),
        ));
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();

    let mut times = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 1 {
            return Err(err(line, format!("expected {} cells, found {}", dim + 1, record.len())));
        }
        let mut cells = record.iter().enumerate().map(|(col, cell)| {
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("column {col}: non-finite or malformed value {cell:?}")))
        });
        let t = cells.next().expect("t column")?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(err(line, format!("timestamp {t} is not after {prev}")));
            }
        }
        times.push(t);
        for v in cells {
            values.push(v?);
        }
    }
    if times.is_empty() {
        return Err(err(1, "no rows".into()));
    }
    let rate = match rate_hz {
        Some(r) => r,
        None => infer_rate(&times).ok_or_else(|| err(1, "cannot infer the sampling rate from a single row".into()))?,
    };
    FeatureMatrix::new(modality, rate, times, values, feature_names)
}

fn infer_rate(times: &[f64]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    // Snap to 1e-6 Hz so jitter in the printed timestamps does not leak in.
    Some(((1.0 / median) * 1e6).round() / 1e6)
}

/// Writes the matrix back out with six decimals per cell.
pub fn write_feature_csv(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(fm.values.len() * 10);
    out.push('t');
    for name in &fm.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, t) in fm.times.iter().enumerate() {
        write!(out, "{t:.6}").expect("write to string");
        for v in fm.row(i) {
            write!(out, ",{v:.6}").expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
