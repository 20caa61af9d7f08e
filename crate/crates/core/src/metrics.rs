//! Screening metrics: rates, ROC/AUC, accuracy with a normal-approximation
//! confidence interval, and confusion matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{Label, Prediction, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl BinaryConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// `(TP/(TP+FN), FP/(FP+TN))`.
pub fn tpr_fpr(cm: &BinaryConfusion) -> Result<(f64, f64)> {
    let pos = cm.tp + cm.fn_;
    let neg = cm.fp + cm.tn;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("rates need at least one positive and one negative"));
    }
    Ok((cm.tp as f64 / pos as f64, cm.fp as f64 / neg as f64))
}

/// Rows are true labels, columns predicted labels. Abstentions are counted
/// per true label outside the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub abstained: [u64; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, actual: Label, predicted: Option<Label>) {
        match predicted {
            Some(p) => self.counts[actual.index()][p.index()] += 1,
            None => self.abstained[actual.index()] += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.abstained.iter().sum::<u64>()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn abstentions(&self) -> u64 {
        self.abstained.iter().sum()
    }
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "true\\pred      0      1      2      3  abst")?;
        for k in 0..NUM_CLASSES {
            write!(f, "{k:>9}")?;
            for c in self.counts[k] {
                write!(f, " {c:>6}")?;
            }
            writeln!(f, " {:>5}", self.abstained[k])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Score at or above which a sample is called positive; `None` is the
    /// sentinel above every score.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Sweeps every unique score, descending, after a sentinel that calls
/// nothing positive.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::invalid("score and label counts differ"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_curve"));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("ROC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: None,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: Some(s),
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under a curve that runs monotonically from (0,0) to
/// (1,1).
pub fn auc(curve: &RocCurve) -> Result<f64> {
    let pts = &curve.points;
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) if pts.len() >= 2 => (f, l),
        _ => return Err(Error::invalid("ROC curve needs at least two points")),
    };
    if (first.fpr, first.tpr) != (0.0, 0.0) || (last.fpr, last.tpr) != (1.0, 1.0) {
        return Err(Error::invalid("ROC curve must run from (0,0) to (1,1)"));
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        if w[1].fpr < w[0].fpr || w[1].tpr < w[0].tpr {
            return Err(Error::invalid("ROC curve is not monotone"));
        }
        area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
    }
    Ok(area)
}

/// `P(score⁺ > score⁻) + ½·P(tie)`, via the ROC curve.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    auc(&roc_curve(scores, positive)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCi {
    /// Percent.
    pub accuracy: f64,
    /// Percent; the interval is `accuracy ± half_width`.
    pub half_width: f64,
}

/// Accuracy with a Wald interval at confidence `level`.
pub fn accuracy_ci(correct: u64, total: u64, level: f64) -> Result<AccuracyCi> {
    if total == 0 || correct > total {
        return Err(Error::invalid(format!("invalid counts {correct}/{total}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let p = correct as f64 / total as f64;
    Ok(AccuracyCi {
        accuracy: 100.0 * p,
        half_width: 100.0 * z * (p * (1.0 - p) / total as f64).sqrt(),
    })
}

/// Best depressed-class similarity minus best class-0 similarity.
pub fn severity_score_for_roc(prediction: &Prediction) -> Result<f64> {
    let s = &prediction.class_scores;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("prediction lacks class scores"));
    }
    Ok(s[1].max(s[2]).max(s[3]) - s[0])
}

/// Writes `threshold,fpr,tpr` rows and a trailing `# auc=` line.
pub fn roc_table(curve: &RocCurve) -> Result<String> {
    let area = auc(curve)?;
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        match p.threshold {
            Some(t) => write!(out, "{t}"),
            None => write!(out, "inf"),
        }
        .expect("write to String");
        writeln!(out, ",{},{}", p.fpr, p.tpr).expect("write to String");
    }
    writeln!(out, "# auc={area}").expect("write to String");
    Ok(out)
}

/// Reads a table written by [`roc_table`], returning the curve and the
/// recorded AUC.
pub fn parse_roc_table(text: &str) -> Result<(RocCurve, f64)> {
    let bad = |line: usize, msg: &str| Error::Parse {
        path: "<roc>".into(),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,fpr,tpr")) => {}
        _ => return Err(bad(1, "expected header threshold,fpr,tpr")),
    }
    let mut points = Vec::new();
    let mut area = None;
    for (i, line) in lines {
        if let Some(v) = line.strip_prefix("# auc=") {
            area = Some(v.parse().map_err(|_| bad(i + 1, "bad auc"))?);
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        if cells.len() != 3 {
            return Err(bad(i + 1, "expected 3 columns"));
        }
        points.push(RocPoint {
            threshold: if cells[0] == "inf" { None } else { Some(num(cells[0])?) },
            fpr: num(cells[1])?,
            tpr: num(cells[2])?,
        });
    }
    let area = area.ok_or_else(|| bad(text.lines().count(), "missing auc line"))?;
    Ok((RocCurve { points }, area))
}

/// Everything reported for one labelled evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: u64,
    /// Abstentions count as errors.
    pub correct: u64,
    pub accuracy: AccuracyCi,
    /// Fraction of samples that received a label.
    pub coverage: f64,
    /// Accuracy among labelled samples, percent; `None` if all abstained.
    pub covered_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Depressed (labels 1–3) versus not, abstentions included.
    pub screening: BinaryConfusion,
    pub roc: Option<RocCurve>,
    pub auc: Option<f64>,
}

/// Scores `(truth, prediction)` pairs. ROC and AUC are omitted when only
/// one screening class is present.
pub fn evaluate(results: &[(Label, Prediction)]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut confusion = ConfusionMatrix::default();
    let mut screening = BinaryConfusion::default();
    let mut scores = Vec::with_capacity(results.len());
    let mut positive = Vec::with_capacity(results.len());
    for (truth, p) in results {
        confusion.record(*truth, p.label);
        let score = severity_score_for_roc(p)?;
        screening.record(truth.value() > 0, score > 0.0);
        scores.push(score);
        positive.push(truth.value() > 0);
    }
    let total = confusion.total();
    let correct = confusion.correct();
    let labelled = total - confusion.abstentions();
    let roc = roc_curve(&scores, &positive).ok();
    let auc = roc.as_ref().map(auc).transpose()?;
    Ok(EvalReport {
        total,
        correct,
        accuracy: accuracy_ci(correct, total, 0.95)?,
        coverage: labelled as f64 / total as f64,
        covered_accuracy: (labelled > 0).then(|| 100.0 * correct as f64 / labelled as f64),
        confusion,
        screening,
        roc,
        auc,
    })
}
