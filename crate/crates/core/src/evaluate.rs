//! Segment-level evaluation: per-image inference, majority-vote
//! aggregation, confusion counts with ACTIVITY as the positive class, and
//! the Mann-Whitney AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::BinaryLabel;
use crate::models::{ModelError, Network};
use crate::Image;
use remission_nn::Tensor;

/// Label assigned when a segment's image votes are split evenly.
pub const TIE_POLICY: BinaryLabel = BinaryLabel::Activity;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty prediction set")]
    EmptyPredictionSet,
    #[error("AUC needs both classes among the truths")]
    SingleClassOnly,
    #[error("no segments to evaluate")]
    EmptySegments,
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Most frequent label; an exact tie yields [`TIE_POLICY`].
pub fn aggregate(labels: &[BinaryLabel]) -> Result<BinaryLabel, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::EmptyPredictionSet);
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    Ok(match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => BinaryLabel::Activity,
        std::cmp::Ordering::Less => BinaryLabel::Remission,
        std::cmp::Ordering::Equal => TIE_POLICY,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }
}

/// Tally `(predicted, truth)` pairs.
pub fn confusion(preds: &[(BinaryLabel, BinaryLabel)]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for &(p, t) in preds {
        match (p.is_positive(), t.is_positive()) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
        }
    }
    c
}

/// Accuracy, sensitivity and specificity. A metric whose denominator is
/// zero is `None` rather than 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics { accuracy: ratio(c.tp + c.tn, c.total()), sensitivity: ratio(c.tp, c.positives()), specificity: ratio(c.tn, c.negatives()) }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[(f64, BinaryLabel)]) -> Result<f64, EvalError> {
    let n_pos = scores.iter().filter(|s| s.1.is_positive()).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassOnly);
    }
    let mut sorted: Vec<(f64, BinaryLabel)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // U statistic in doubled units so ties stay integral
    let mut u2: u128 = 0;
    let mut negs_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let p = sorted[i..j].iter().filter(|s| s.1.is_positive()).count() as u128;
        let q = (j - i) as u128 - p;
        u2 += p * (2 * negs_below + q);
        negs_below += q;
        i = j;
    }
    Ok(u2 as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// ROC curve as `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`, one point per
/// distinct score threshold (descending).
pub fn roc_curve(scores: &[(f64, BinaryLabel)]) -> Result<Vec<(f64, f64)>, EvalError> {
    let n_pos = scores.iter().filter(|s| s.1.is_positive()).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassOnly);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Ok(pts)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// One segment's images, ready for inference.
#[derive(Debug, Clone)]
pub struct EvalSegment {
    pub segment_id: String,
    pub truth: BinaryLabel,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub segment_id: String,
    pub truth: BinaryLabel,
    pub image_labels: Vec<BinaryLabel>,
    /// Per-image probability of ACTIVITY.
    pub image_scores: Vec<f64>,
    pub aggregate_label: BinaryLabel,
    /// Mean of `image_scores`.
    pub aggregate_score: f64,
}

impl SegmentPrediction {
    pub fn from_scores(segment_id: impl Into<String>, truth: BinaryLabel, image_scores: Vec<f64>) -> Result<Self, EvalError> {
        let image_labels: Vec<BinaryLabel> = image_scores.iter().map(|&p| image_label(p)).collect();
        let aggregate_label = aggregate(&image_labels)?;
        let aggregate_score = image_scores.iter().sum::<f64>() / image_scores.len() as f64;
        Ok(Self { segment_id: segment_id.into(), truth, image_labels, image_scores, aggregate_label, aggregate_score })
    }
}

/// Image-level decision: argmax of the two class probabilities, with a
/// 0.5 tie resolved like segment ties.
pub fn image_label(p_activity: f64) -> BinaryLabel {
    if p_activity > 0.5 || (p_activity == 0.5 && TIE_POLICY.is_positive()) {
        BinaryLabel::Activity
    } else {
        BinaryLabel::Remission
    }
}

/// Activity probabilities of every image of every segment, batched.
pub fn predict_segments(net: &Network<f32>, segments: &[EvalSegment], batch_size: usize) -> Result<Vec<SegmentPrediction>, EvalError> {
    let flat: Vec<&Image> = segments.iter().flat_map(|s| s.images.iter()).collect();
    let s = net.config.input_size;
    let mut probs = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(batch_size.max(1)) {
        if let Some(bad) = chunk.iter().find(|i| i.shape() != [s, s, 3]) {
            return Err(ModelError::ShapeMismatch { size: s, actual: bad.shape().to_vec() }.into());
        }
        let batch = Tensor::stack(chunk).expect("shapes checked");
        let p = net.predict_proba(&batch)?;
        probs.extend(p.data().chunks(2).map(|r| f64::from(r[1])));
    }
    let mut it = probs.into_iter();
    segments
        .iter()
        .map(|seg| SegmentPrediction::from_scores(seg.segment_id.clone(), seg.truth, it.by_ref().take(seg.images.len()).collect()))
        .collect()
}

/// Segment-level metrics and the per-segment prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub tie_policy: BinaryLabel,
    pub n: usize,
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    /// Sorted by `segment_id`.
    pub segments: Vec<SegmentPrediction>,
}

impl EvalReport {
    pub fn from_predictions(mut segments: Vec<SegmentPrediction>, config_digest: impl Into<String>) -> Result<Self, EvalError> {
        if segments.is_empty() {
            return Err(EvalError::EmptySegments);
        }
        segments.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
        let pairs: Vec<_> = segments.iter().map(|s| (s.aggregate_label, s.truth)).collect();
        let counts = confusion(&pairs);
        let m = metrics(&counts);
        let scores: Vec<_> = segments.iter().map(|s| (s.aggregate_score, s.truth)).collect();
        Ok(Self {
            config_digest: config_digest.into(),
            tie_policy: TIE_POLICY,
            n: segments.len(),
            counts,
            accuracy: m.accuracy,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            auc: auc(&scores).ok(),
            segments,
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { accuracy: self.accuracy, sensitivity: self.sensitivity, specificity: self.specificity }
    }

    pub fn roc(&self) -> Option<Vec<(f64, f64)>> {
        let scores: Vec<_> = self.segments.iter().map(|s| (s.aggregate_score, s.truth)).collect();
        roc_curve(&scores).ok()
    }

    /// Recompute everything derivable from the per-segment table and
    /// compare with the stored values.
    pub fn verify(&self) -> Result<(), EvalError> {
        let again = Self::from_predictions(self.segments.clone(), self.config_digest.clone())?;
        for s in &self.segments {
            let re = SegmentPrediction::from_scores(s.segment_id.clone(), s.truth, s.image_scores.clone())?;
            if re.aggregate_label != s.aggregate_label || re.image_labels != s.image_labels {
                return Err(EvalError::Inconsistent(format!("segment {} labels do not follow its scores", s.segment_id)));
            }
        }
        if again != *self {
            return Err(EvalError::Inconsistent("stored metrics differ from recomputation".into()));
        }
        Ok(())
    }

    /// Line-delimited serialization: one summary line, then one line per
    /// segment.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            kind: &'static str,
            config_digest: &'a str,
            tie_policy: BinaryLabel,
            n: usize,
            counts: ConfusionCounts,
            accuracy: Option<f64>,
            sensitivity: Option<f64>,
            specificity: Option<f64>,
            auc: Option<f64>,
        }
        #[derive(Serialize)]
        struct Row<'a> {
            kind: &'static str,
            #[serde(flatten)]
            seg: &'a SegmentPrediction,
        }
        let mut out = serde_json::to_string(&Summary {
            kind: "summary",
            config_digest: &self.config_digest,
            tie_policy: self.tie_policy,
            n: self.n,
            counts: self.counts,
            accuracy: self.accuracy,
            sensitivity: self.sensitivity,
            specificity: self.specificity,
            auc: self.auc,
        })
        .expect("serializable");
        out.push('\n');
        for s in &self.segments {
            out.push_str(&serde_json::to_string(&Row { kind: "segment", seg: s }).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Parse [`EvalReport::to_jsonl`] output and check self-consistency.
    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        #[derive(Deserialize)]
        struct Summary {
            config_digest: String,
            tie_policy: BinaryLabel,
            n: usize,
            counts: ConfusionCounts,
            accuracy: Option<f64>,
            sensitivity: Option<f64>,
            specificity: Option<f64>,
            auc: Option<f64>,
        }
        let bad = |m: String| EvalError::Malformed(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| bad("empty report".into()))?;
        let v: serde_json::Value = serde_json::from_str(first).map_err(|e| bad(e.to_string()))?;
        if v.get("kind").and_then(|k| k.as_str()) != Some("summary") {
            return Err(bad("first line is not a summary record".into()));
        }
        let s: Summary = serde_json::from_value(strip_kind(v)).map_err(|e| bad(e.to_string()))?;
        let mut segments = Vec::new();
        for (i, line) in lines.enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            segments.push(serde_json::from_value(strip_kind(v)).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
        }
        let report = Self {
            config_digest: s.config_digest,
            tie_policy: s.tie_policy,
            n: s.n,
            counts: s.counts,
            accuracy: s.accuracy,
            sensitivity: s.sensitivity,
            specificity: s.specificity,
            auc: s.auc,
            segments,
        };
        report.verify()?;
        Ok(report)
    }
}

fn strip_kind(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("kind");
    }
    v
}

/// Evaluate a trained network on `segments`.
pub fn evaluate_split(net: &Network<f32>, segments: &[EvalSegment], config_digest: &str, batch_size: usize) -> Result<EvalReport, EvalError> {
    if segments.is_empty() {
        return Err(EvalError::EmptySegments);
    }
    let preds = predict_segments(net, segments, batch_size)?;
    EvalReport::from_predictions(preds, config_digest)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: String,
    pub backbone: String,
    pub image_size: String,
    pub resampling: String,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub config_digest: String,
}

pub const TABLE_COLUMNS: [&str; 8] = ["ID", "Backbone", "Image size", "Resampling", "Accuracy", "Sensitivity", "Specificity", "AUC"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Markdown table with the fixed column set plus a trailing digest column.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} | Config digest |", TABLE_COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len() + 1));
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.id,
            r.backbone,
            r.image_size,
            r.resampling,
            cell(r.accuracy),
            cell(r.sensitivity),
            cell(r.specificity),
            cell(r.auc),
            &r.config_digest[..r.config_digest.len().min(12)]
        );
    }
    out
}
