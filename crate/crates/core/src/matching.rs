//! Greedy score-ordered matching of detections to ground truth, and AP.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::interchange::{Detection, ImageIntrospection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DetectionLabel {
    TruePositive { gt_id: u64, iou: f64 },
    FalsePositive,
}

impl DetectionLabel {
    pub fn is_tp(&self) -> bool {
        matches!(self, DetectionLabel::TruePositive { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GtLabel {
    Detected { detection: usize },
    FalseNegative,
    /// Excluded from evaluation (`ignore` flag).
    Ignored,
}

/// Labels indexed like the image's `detections` and `ground_truth` lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub detections: Vec<DetectionLabel>,
    pub ground_truth: Vec<GtLabel>,
    pub theta_loc: f64,
}

impl MatchResult {
    /// Indices (into `ground_truth`) of the false negatives.
    pub fn false_negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.ground_truth
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == GtLabel::FalseNegative)
            .map(|(i, _)| i)
    }

    pub fn is_false_negative(&self, gt_index: usize) -> bool {
        self.ground_truth.get(gt_index) == Some(&GtLabel::FalseNegative)
    }

    pub fn tp_count(&self) -> usize {
        self.detections.iter().filter(|d| d.is_tp()).count()
    }

    pub fn fp_count(&self) -> usize {
        self.detections.len() - self.tp_count()
    }

    pub fn fn_count(&self) -> usize {
        self.false_negatives().count()
    }
}

/// Processing order: score descending, then a content key, then dump index.
///
/// The content key (class, then box corners) makes the order independent of
/// how equal-score detections were listed in the dump.
pub fn detection_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.class_index.cmp(&db.class_index))
            .then_with(|| {
                da.bbox
                    .to_array()
                    .iter()
                    .zip(db.bbox.to_array().iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    order
}

pub fn match_image(image: &ImageIntrospection, theta_loc: f64) -> MatchResult {
    let gts = &image.ground_truth;
    let mut gt_labels: Vec<GtLabel> = gts
        .iter()
        .map(|g| if g.ignore { GtLabel::Ignored } else { GtLabel::FalseNegative })
        .collect();
    let mut det_labels = vec![DetectionLabel::FalsePositive; image.detections.len()];

    for d in detection_order(&image.detections) {
        let det = &image.detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_labels[g] != GtLabel::FalseNegative || gt.class_index != det.class_index {
                continue;
            }
            let v = iou(&gt.bbox, &det.bbox);
            if v < theta_loc {
                continue;
            }
            let better = match best {
                None => true,
                Some((bg, bv)) => v > bv || (v == bv && gt.id < gts[bg].id),
            };
            if better {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            gt_labels[g] = GtLabel::Detected { detection: d };
            det_labels[d] = DetectionLabel::TruePositive {
                gt_id: gts[g].id,
                iou: v,
            };
        }
    }

    MatchResult {
        detections: det_labels,
        ground_truth: gt_labels,
        theta_loc,
    }
}

/// All-point interpolated average precision.
///
/// `ranked_tp[k]` says whether the k-th detection (by descending score) is a
/// true positive. Returns 1 when there are neither detections nor ground
/// truth, 0 when only one side is empty.
pub fn average_precision(ranked_tp: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &is_tp)| {
            tp += usize::from(is_tp);
            (tp as f64 / gt_count as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut env: Vec<f64> = points
        .iter()
        .rev()
        .map(|&(_, p)| {
            envelope = envelope.max(p);
            envelope
        })
        .collect();
    env.reverse();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in points.iter().zip(&env) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Mergeable per-class list of scored TP/FP outcomes plus the GT count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApAccumulator {
    pub scored: Vec<(f64, bool)>,
    pub gt_count: usize,
}

impl ApAccumulator {
    pub fn merge(&mut self, other: &ApAccumulator) {
        self.scored.extend_from_slice(&other.scored);
        self.gt_count += other.gt_count;
    }

    pub fn average_precision(&self) -> f64 {
        let mut scored = self.scored.clone();
        // stable: equal scores keep insertion order
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let ranked: Vec<bool> = scored.iter().map(|s| s.1).collect();
        average_precision(&ranked, self.gt_count)
    }
}
