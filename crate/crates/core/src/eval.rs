//! Detection matching and the metric suite.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geom::Box7;
use crate::iou::iou_3d;

/// Default IoU threshold for a true positive.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("no positives: tp + fn = 0")]
    NoPositives,
    #[error("no predictions: tp + fp = 0")]
    NoPredictions,
    #[error("IoU list is empty")]
    EmptyBatch,
    #[error("category table is empty")]
    EmptyTable,
    #[error("IoU threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("IoU {iou} for category `{category}` outside [0, 1]")]
    InvalidIou { category: String, iou: f64 },
}

/// Detection outcome counts. `tn` stays 0 for box detection, where there is
/// no countable true negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub r#fn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, r#fn: u64) -> Self {
        Self { tp, tn, fp, r#fn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.r#fn
    }
}

impl core::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, r#fn: self.r#fn + o.r#fn }
    }
}

/// One accepted prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: ConfusionCounts,
    /// Accepted pairs in the order they were matched (descending IoU).
    pub matches: Vec<MatchedPair>,
}

/// Greedy one-to-one matching among same-category pairs with
/// IoU >= `threshold`, highest IoU first; ties go to the lower
/// (pred, gt) index pair.
pub fn match_predictions<C: PartialEq>(
    preds: &[(Box7, C)],
    gts: &[(Box7, C)],
    threshold: f64,
) -> Result<MatchResult, MetricError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricError::InvalidThreshold(threshold));
    }
    let mut candidates = Vec::new();
    for (i, (pb, pc)) in preds.iter().enumerate() {
        for (j, (gb, gc)) in gts.iter().enumerate() {
            if pc != gc {
                continue;
            }
            let iou = iou_3d(pb, gb).iou;
            if iou >= threshold {
                candidates.push(MatchedPair { pred: i, gt: j, iou });
            }
        }
    }
    candidates.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let mut pred_used = alloc::vec![false; preds.len()];
    let mut gt_used = alloc::vec![false; gts.len()];
    let mut matches = Vec::new();
    for c in candidates {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            matches.push(c);
        }
    }
    let tp = matches.len() as u64;
    let counts = ConfusionCounts { tp, tn: 0, fp: preds.len() as u64 - tp, r#fn: gts.len() as u64 - tp };
    Ok(MatchResult { counts, matches })
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64, MetricError> {
    match c.total() {
        0 => Err(MetricError::EmptyCounts),
        t => Ok((c.tp + c.tn) as f64 / t as f64),
    }
}

/// `TP / (TP + FN)`.
pub fn recall(c: &ConfusionCounts) -> Result<f64, MetricError> {
    match c.tp + c.r#fn {
        0 => Err(MetricError::NoPositives),
        p => Ok(c.tp as f64 / p as f64),
    }
}

/// `TP / (TP + FP)`.
pub fn precision(c: &ConfusionCounts) -> Result<f64, MetricError> {
    match c.tp + c.fp {
        0 => Err(MetricError::NoPredictions),
        p => Ok(c.tp as f64 / p as f64),
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean IoU over samples.
pub fn miou_samples(ious: &[f64]) -> Result<f64, MetricError> {
    if ious.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryRow {
    pub category: String,
    pub iou: f64,
    pub count: u64,
}

/// Per-category IoU rows with their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryIoUTable {
    pub rows: Vec<CategoryRow>,
    pub miou: f64,
}

/// Unweighted mean over categories. Rows keep their input order; the mean
/// is summed in category-name order so it does not depend on row order.
pub fn miou_categories(rows: Vec<CategoryRow>) -> Result<CategoryIoUTable, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyTable);
    }
    if let Some(r) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.iou)) {
        return Err(MetricError::InvalidIou { category: r.category.clone(), iou: r.iou });
    }
    let mut sorted: Vec<&CategoryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.category.cmp(&b.category).then(a.iou.total_cmp(&b.iou)));
    let miou = sorted.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64;
    Ok(CategoryIoUTable { rows, miou })
}

/// Groups per-sample IoUs by category into mean-IoU rows, ordered by
/// first appearance.
pub fn category_rows<'a>(samples: impl IntoIterator<Item = (&'a str, f64)>) -> Vec<CategoryRow> {
    let mut rows: Vec<(CategoryRow, f64)> = Vec::new();
    for (category, iou) in samples {
        match rows.iter_mut().find(|(r, _)| r.category == category) {
            Some((row, sum)) => {
                row.count += 1;
                *sum += iou;
            }
            None => rows.push((CategoryRow { category: category.into(), iou: 0.0, count: 1 }, iou)),
        }
    }
    rows.into_iter()
        .map(|(mut r, sum)| {
            r.iou = sum / r.count as f64;
            r
        })
        .collect()
}
