use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, Modality};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Window length in seconds.
    pub window_s: f64,
    /// A trailing partial window shorter than this is dropped.
    pub min_tail_s: f64,
    /// Windows are mean-pooled along time to at most this many steps.
    pub max_steps: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_s: 300.0,
            min_tail_s: 30.0,
            max_steps: 120,
        }
    }
}

/// One pooled window of one modality of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub session_id: String,
    pub modality: Modality,
    pub window_index: usize,
    /// Pooled `T' × d` frames, `T' <= max_steps`.
    pub frames: Tensor,
    pub label: Option<Label>,
}

/// Cuts the (already scrubbed) stream into consecutive non-overlapping
/// windows of `window_s` seconds and pools each one.
pub fn segment_stream(
    fm: &FeatureMatrix,
    session_id: &str,
    label: Option<Label>,
    config: &PreprocessConfig,
) -> Result<Vec<Segment>> {
    if fm.is_empty() {
        return Err(Error::invalid(format!(
            "session {session_id}: empty {} stream",
            fm.modality
        )));
    }
    if !(config.window_s > 0.0) || config.max_steps == 0 {
        return Err(Error::invalid("window length and max_steps must be positive"));
    }
    let per_window = ((config.window_s * fm.rate_hz).round() as usize).max(1);
    let d = fm.dim();
    let mut out = Vec::new();
    for (index, start) in (0..fm.len()).step_by(per_window).enumerate() {
        let end = (start + per_window).min(fm.len());
        let rows = end - start;
        if rows < per_window {
            let seconds = rows as f64 / fm.rate_hz;
            if seconds + 1e-9 < config.min_tail_s {
                break;
            }
        }
        let frames = mean_pool(&fm.values[start * d..end * d], d, config.max_steps)?;
        out.push(Segment {
            session_id: session_id.to_string(),
            modality: fm.modality,
            window_index: index,
            frames,
            label,
        });
    }
    Ok(out)
}

/// Averages `rows × d` values into `min(rows, max_steps)` contiguous chunks;
/// chunk `i` covers rows `[i·rows/n, (i+1)·rows/n)`.
pub fn mean_pool(values: &[f64], d: usize, max_steps: usize) -> Result<Tensor> {
    let rows = values.len() / d;
    let n = rows.min(max_steps);
    if n == rows {
        return Tensor::new(vec![rows, d], values.to_vec());
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let (a, b) = (i * rows / n, (i + 1) * rows / n);
        let dst = &mut out[i * d..(i + 1) * d];
        for r in a..b {
            for (o, v) in dst.iter_mut().zip(&values[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let k = (b - a) as f64;
        dst.iter_mut().for_each(|o| *o /= k);
    }
    Tensor::new(vec![n, d], out)
}
