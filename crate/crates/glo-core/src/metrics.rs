//! Evaluation metrics: circle-IoU average precision, Dice statistics, and
//! classification metrics (balanced accuracy, macro-F1, AUC, confusion).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{circle_iou, Circle, CircleDetection};
use crate::mask::Mask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// IoU thresholds for the headline AP: 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Area cutoffs for the size buckets, applied to circle area (pi r^2).
pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA_MAX: f64 = 96.0 * 96.0;

/// Detections and ground-truth circles for one image; association between
/// images is positional.
#[derive(Debug, Clone, Default)]
pub struct ImageInstances {
    pub detections: Vec<CircleDetection>,
    pub truths: Vec<Circle>,
}

/// Half-open area range selecting ground truths for a size bucket.
#[derive(Debug, Clone, Copy)]
struct AreaRange {
    min: f64,
    max: f64,
}

impl AreaRange {
    const ALL: AreaRange = AreaRange { min: 0.0, max: f64::INFINITY };
    const SMALL: AreaRange = AreaRange { min: 0.0, max: SMALL_AREA_MAX };
    const MEDIUM: AreaRange = AreaRange { min: SMALL_AREA_MAX, max: MEDIUM_AREA_MAX };

    fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }
}

/// One scored decision in the pooled precision-recall sweep.
struct ScoredOutcome {
    score: f64,
    image: usize,
    det: usize,
    tp: bool,
}

/// Greedy matching at one IoU threshold for one image.
///
/// Detections are visited in score-descending order; each matches the
/// unmatched in-range ground truth with the highest IoU at or above the
/// threshold (ties to the lowest truth index). A detection whose only
/// qualifying matches are out-of-range truths is ignored rather than
/// counted as a false positive, as is an unmatched detection whose own
/// area falls outside the range.
fn match_image(
    img: &ImageInstances,
    image_idx: usize,
    threshold: f64,
    range: AreaRange,
    outcomes: &mut Vec<ScoredOutcome>,
) -> Result<usize, MetricsError> {
    let considered: Vec<bool> = img.truths.iter().map(|g| range.contains(g.area())).collect();
    let n_considered = considered.iter().filter(|&&c| c).count();

    let mut det_order: Vec<usize> = (0..img.detections.len()).collect();
    det_order.sort_by(|&a, &b| {
        img.detections[b]
            .score
            .total_cmp(&img.detections[a].score)
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; img.truths.len()];
    for d in det_order {
        let det = &img.detections[d];
        let mut best_considered: Option<(f64, usize)> = None;
        let mut best_ignored: Option<(f64, usize)> = None;
        for (g, truth) in img.truths.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = circle_iou(&det.circle, truth)?;
            if iou < threshold {
                continue;
            }
            let slot = if considered[g] { &mut best_considered } else { &mut best_ignored };
            let better = match slot {
                Some((best, _)) => iou > *best,
                None => true,
            };
            if better {
                *slot = Some((iou, g));
            }
        }
        if let Some((_, g)) = best_considered {
            matched[g] = true;
            outcomes.push(ScoredOutcome { score: det.score, image: image_idx, det: d, tp: true });
        } else if best_ignored.is_some() {
            // Matches only an out-of-range truth: ignored entirely.
        } else if range.contains(det.circle.area()) {
            outcomes.push(ScoredOutcome { score: det.score, image: image_idx, det: d, tp: false });
        }
    }
    Ok(n_considered)
}

/// 101-point interpolated average precision from pooled outcomes.
fn ap_from_outcomes(mut outcomes: Vec<ScoredOutcome>, n_truth: usize) -> Option<f64> {
    if n_truth == 0 {
        return None;
    }
    outcomes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.det.cmp(&b.det))
    });
    let mut precisions = Vec::with_capacity(outcomes.len());
    let mut recalls = Vec::with_capacity(outcomes.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for o in &outcomes {
        if o.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_truth as f64);
    }
    // Precision envelope: best precision achievable at recall >= r.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut sum = 0.0;
    for step in 0..=100u32 {
        let r = step as f64 / 100.0;
        let idx = recalls.partition_point(|&rec| rec < r);
        if idx < precisions.len() {
            sum += precisions[idx];
        }
    }
    Some(sum / 101.0)
}

fn ap_at(
    images: &[ImageInstances],
    threshold: f64,
    range: AreaRange,
) -> Result<Option<f64>, MetricsError> {
    let mut outcomes = Vec::new();
    let mut n_truth = 0usize;
    for (i, img) in images.iter().enumerate() {
        n_truth += match_image(img, i, threshold, range, &mut outcomes)?;
    }
    Ok(ap_from_outcomes(outcomes, n_truth))
}

/// Average-precision family over the IoU threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApValues {
    /// Mean AP over thresholds 0.50:0.05:0.95.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// AP over ground truths with circle area < 32^2; `None` when no such truth exists.
    pub ap_small: Option<f64>,
    /// AP over ground truths with 32^2 <= circle area < 96^2.
    pub ap_medium: Option<f64>,
}

/// COCO-style average precision with circle IoU.
pub fn average_precision(images: &[ImageInstances]) -> Result<ApValues, MetricsError> {
    let thresholds = coco_thresholds();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        per_threshold.push(ap_at(images, t, AreaRange::ALL)?);
    }
    let defined: Vec<f64> = per_threshold.iter().flatten().copied().collect();
    let ap = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    let mean_over = |range: AreaRange| -> Result<Option<f64>, MetricsError> {
        let mut vals = Vec::new();
        for &t in &thresholds {
            if let Some(v) = ap_at(images, t, range)? {
                vals.push(v);
            }
        }
        Ok(if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) })
    };

    Ok(ApValues {
        ap,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        ap_small: mean_over(AreaRange::SMALL)?,
        ap_medium: mean_over(AreaRange::MEDIUM)?,
    })
}

/// AP at a single IoU threshold with no size filtering.
pub fn average_precision_at(
    images: &[ImageInstances],
    threshold: f64,
) -> Result<Option<f64>, MetricsError> {
    ap_at(images, threshold, AreaRange::ALL)
}

/// Dice similarity of two binary masks; both-empty is defined as 1.0 so
/// all-background patches do not poison means.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricsError::ShapeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (pa, pb) in a.iter().zip(b.iter()) {
        if pa && pb {
            inter += 1;
        }
        total += pa as u64 + pb as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean and population standard deviation of a set of Dice values.
pub fn dice_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// K-class confusion matrix; rows index ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Option<Self> {
        (counts.len() == k * k).then_some(Confusion { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, pred)).sum()
    }

    /// Truth classes that never occur; excluded from class-mean metrics.
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.k).filter(|&t| self.row_sum(t) == 0).collect()
    }
}

/// Unweighted mean per-class recall over classes with ground truth.
pub fn balanced_accuracy(confusion: &Confusion) -> Result<f64, MetricsError> {
    if confusion.total() == 0 {
        return Err(MetricsError::Undefined("balanced accuracy of an all-zero matrix".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..confusion.k() {
        let truth = confusion.row_sum(t);
        if truth == 0 {
            continue;
        }
        sum += confusion.get(t, t) as f64 / truth as f64;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Unweighted mean per-class F1 over classes with ground truth. A class
/// with truth but no correct or predicted positives contributes 0.
pub fn macro_f1(confusion: &Confusion) -> Result<f64, MetricsError> {
    if confusion.total() == 0 {
        return Err(MetricsError::Undefined("macro F1 of an all-zero matrix".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for cls in 0..confusion.k() {
        let truth = confusion.row_sum(cls);
        if truth == 0 {
            continue;
        }
        let tp = confusion.get(cls, cls) as f64;
        let pred = confusion.col_sum(cls) as f64;
        let recall = tp / truth as f64;
        let precision = if pred == 0.0 { 0.0 } else { tp / pred };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        sum += f1;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Rank-based (Mann-Whitney) AUC with average ranks for ties; equals the
/// trapezoid area under the empirical ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Undefined("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::Undefined("AUC requires both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average rank for the tie group spanning positions i..=j (1-based).
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Bundle of every metric the evaluation subcommand reports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<ApValues>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    /// Classes with no ground truth, excluded from class-mean metrics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.3}"),
        None => "n/a".into(),
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(ap) = &self.detection {
            writeln!(f, "AP      AP50    AP75    APS     APM")?;
            writeln!(
                f,
                "{:<7} {:<7} {:<7} {:<7} {:<7}",
                fmt_opt(ap.ap),
                fmt_opt(ap.ap50),
                fmt_opt(ap.ap75),
                fmt_opt(ap.ap_small),
                fmt_opt(ap.ap_medium),
            )?;
        }
        if self.dice_mean.is_some() {
            writeln!(
                f,
                "Dice    {} +- {}",
                fmt_opt(self.dice_mean),
                fmt_opt(self.dice_std)
            )?;
        }
        if self.balanced_accuracy.is_some() || self.macro_f1.is_some() || self.auc.is_some() {
            writeln!(f, "Balance acc     F1      AUC")?;
            writeln!(
                f,
                "{:<15} {:<7} {:<7}",
                fmt_opt(self.balanced_accuracy),
                fmt_opt(self.macro_f1),
                fmt_opt(self.auc),
            )?;
        }
        if let Some(cm) = &self.confusion {
            writeln!(f, "confusion (rows = truth):")?;
            for t in 0..cm.k() {
                let row: Vec<String> = (0..cm.k()).map(|p| cm.get(t, p).to_string()).collect();
                writeln!(f, "  {}", row.join(" "))?;
            }
        }
        if !self.excluded_classes.is_empty() {
            writeln!(f, "excluded (no ground truth): {}", self.excluded_classes.join(", "))?;
        }
        Ok(())
    }
}
