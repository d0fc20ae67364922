//! Class-wise greedy non-maximum suppression over refined candidates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::interchange::{ClassCatalog, ClassIndex, Detection, RefinedCandidate, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    /// Minimum class score for a candidate to enter suppression (θ_cls).
    pub score_threshold: f64,
    /// Keep at most this many candidates per class before suppression.
    pub top_k_pre: Option<usize>,
    /// Suppress at `IoU >= iou_threshold` when set, at `IoU > iou_threshold` otherwise.
    pub suppress_at_equal: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.3,
            top_k_pre: None,
            suppress_at_equal: true,
        }
    }
}

impl NmsConfig {
    pub fn new(iou_threshold: f64, score_threshold: f64) -> Self {
        Self {
            iou_threshold,
            score_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(format!("nms iou threshold {} outside (0, 1)", self.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(format!("score threshold {} outside [0, 1]", self.score_threshold));
        }
        Ok(())
    }

    /// Whether a box at overlap `overlap` with a kept box is suppressed.
    pub fn suppresses(&self, overlap: f64) -> bool {
        if self.suppress_at_equal {
            overlap >= self.iou_threshold
        } else {
            overlap > self.iou_threshold
        }
    }
}

/// Descending score, then ascending candidate index.
fn rank(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Kept candidate indices for one class, in kept (rank) order.
pub fn replay_class(refined: &[RefinedCandidate], class_index: ClassIndex, cfg: &NmsConfig) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = refined
        .iter()
        .enumerate()
        .filter(|(_, r)| r.serves_class(class_index))
        .map(|(i, r)| (i, r.scores.class_score(class_index)))
        .filter(|(_, s)| *s >= cfg.score_threshold)
        .collect();
    ranked.sort_by(|a, b| rank(*a, *b));
    if let Some(k) = cfg.top_k_pre {
        ranked.truncate(k);
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, _) in ranked {
        let b = &refined[i].bbox;
        if kept.iter().all(|&k| !cfg.suppresses(iou(&refined[k].bbox, b))) {
            kept.push(i);
        }
    }
    kept
}

/// Reconstructs final detections: classes in catalog order, each in kept order.
pub fn replay(refined: &[RefinedCandidate], catalog: &ClassCatalog, cfg: &NmsConfig) -> Vec<Detection> {
    catalog
        .class_indices()
        .flat_map(|c| {
            replay_class(refined, c, cfg).into_iter().map(move |i| Detection {
                bbox: refined[i].bbox,
                class_index: c,
                score: refined[i].scores.class_score(c),
                source_candidate: Some(i),
            })
        })
        .collect()
}

/// The kept same-class detection that suppressed `victim`, if any.
///
/// Only detections scoring at least the victim's `class_index` score are
/// considered; `None` means the victim was lost to `top_k_pre` truncation.
pub fn find_suppressor<'a>(
    victim: &RefinedCandidate,
    class_index: ClassIndex,
    kept: &'a [Detection],
    cfg: &NmsConfig,
) -> Option<&'a Detection> {
    let victim_score = victim.scores.class_score(class_index);
    kept.iter()
        .filter(|d| d.class_index == class_index && d.score >= victim_score)
        .filter(|d| cfg.suppresses(iou(&d.bbox, &victim.bbox)))
        .max_by(|a, b| a.score.total_cmp(&b.score).then(Ordering::Greater))
}

/// Turns detections back into single-class candidates, for re-running suppression.
pub fn detections_as_candidates(dets: &[Detection], catalog: &ClassCatalog) -> Vec<RefinedCandidate> {
    dets.iter()
        .enumerate()
        .map(|(i, d)| {
            let mut scores = vec![0.0; catalog.score_len()];
            scores[d.class_index as usize - 1] = d.score;
            RefinedCandidate {
                proposal_id: i as u64,
                bbox: d.bbox,
                scores: ScoreVector::new(scores),
                class_specific_for: Some(d.class_index),
            }
        })
        .collect()
}

/// `(class, box, score)` view of a detection list, ignoring source links.
pub fn detection_key(d: &Detection) -> (ClassIndex, [f64; 4], f64) {
    (d.class_index, BBox::to_array(&d.bbox), d.score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(n: usize) -> ClassCatalog {
        ClassCatalog::new((0..n).map(|i| format!("c{i}")).collect(), false).unwrap()
    }

    fn cand(b: [f64; 4], scores: &[f64]) -> RefinedCandidate {
        RefinedCandidate {
            proposal_id: 0,
            bbox: BBox::try_from(b).unwrap(),
            scores: ScoreVector::new(scores.to_vec()),
            class_specific_for: None,
        }
    }

    #[test]
    fn single_candidate_kept() {
        let r = vec![cand([0.0, 0.0, 1.0, 1.0], &[0.9])];
        let d = replay(&r, &catalog(1), &NmsConfig::default());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].source_candidate, Some(0));
    }

    #[test]
    fn identical_boxes_keep_higher_score() {
        let r = vec![cand([0.0, 0.0, 1.0, 1.0], &[0.8]), cand([0.0, 0.0, 1.0, 1.0], &[0.9])];
        let d = replay(&r, &catalog(1), &NmsConfig::default());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].score, 0.9);
        assert_eq!(d[0].source_candidate, Some(1));
    }

    #[test]
    fn low_overlap_boxes_both_kept() {
        // IoU 1/7 < 0.5
        let r = vec![cand([0.0, 0.0, 2.0, 2.0], &[0.9]), cand([1.0, 1.0, 3.0, 3.0], &[0.8])];
        assert_eq!(replay(&r, &catalog(1), &NmsConfig::default()).len(), 2);
    }

    #[test]
    fn boundary_comparison_is_configurable() {
        // IoU exactly 0.5: [0,0,2,1] vs [0,0,1,1] -> 1 / 2
        let r = vec![cand([0.0, 0.0, 2.0, 1.0], &[0.9]), cand([0.0, 0.0, 1.0, 1.0], &[0.8])];
        let closed = NmsConfig::default();
        let open = NmsConfig {
            suppress_at_equal: false,
            ..closed
        };
        assert_eq!(replay(&r, &catalog(1), &closed).len(), 1);
        assert_eq!(replay(&r, &catalog(1), &open).len(), 2);
    }

    #[test]
    fn classes_are_independent_and_thresholded() {
        let r = vec![cand([0.0, 0.0, 1.0, 1.0], &[0.9, 0.85]), cand([0.0, 0.0, 1.0, 1.0], &[0.2, 0.8])];
        let d = replay(&r, &catalog(2), &NmsConfig::default());
        let keys: Vec<_> = d.iter().map(|d| (d.class_index, d.source_candidate)).collect();
        assert_eq!(keys, vec![(1, Some(0)), (2, Some(0))]);
    }

    #[test]
    fn class_specific_candidates_only_serve_their_class() {
        let mut a = cand([0.0, 0.0, 1.0, 1.0], &[0.9, 0.9]);
        a.class_specific_for = Some(2);
        let d = replay(&[a], &catalog(2), &NmsConfig::default());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_index, 2);
    }

    #[test]
    fn ties_broken_by_index() {
        let r = vec![cand([0.0, 0.0, 1.0, 1.0], &[0.7]), cand([0.0, 0.0, 1.0, 1.0], &[0.7])];
        let d = replay(&r, &catalog(1), &NmsConfig::default());
        assert_eq!(d[0].source_candidate, Some(0));
    }

    #[test]
    fn top_k_truncation() {
        let r = vec![cand([0.0, 0.0, 1.0, 1.0], &[0.9]), cand([5.0, 5.0, 6.0, 6.0], &[0.8])];
        let cfg = NmsConfig {
            top_k_pre: Some(1),
            ..NmsConfig::default()
        };
        let d = replay(&r, &catalog(1), &cfg);
        assert_eq!(d.len(), 1);
        // the truncated candidate overlapped nothing
        assert!(find_suppressor(&r[1], 1, &d, &cfg).is_none());
    }

    #[test]
    fn suppressor_of_identical_victim() {
        let r = vec![cand([0.0, 0.0, 1.0, 1.0], &[0.9]), cand([0.0, 0.0, 1.0, 1.0], &[0.8])];
        let cfg = NmsConfig::default();
        let d = replay(&r, &catalog(1), &cfg);
        let s = find_suppressor(&r[1], 1, &d, &cfg).unwrap();
        assert_eq!(s.source_candidate, Some(0));
    }
}
