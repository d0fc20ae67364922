use std::fmt;

use crate::geometry::iou;
use crate::interchange::{ClassCatalog, ClassIndex, ImageIntrospection};
use crate::nms::{replay, NmsConfig};

/// Declared and replayed detections pair up when their boxes overlap at least this much.
pub const REPLAY_MATCH_IOU: f64 = 0.99;

/// A non-fatal disagreement between a dump and its own NMS replay.
#[derive(Debug, Clone, PartialEq)]
pub enum ConsistencyDiagnostic {
    /// A declared detection scores below θ_cls.
    SubThreshold { detection: usize, score: f64, threshold: f64 },
    /// A declared detection has no counterpart in the replay.
    NotReplayed { detection: usize, class_index: ClassIndex },
    /// The replay keeps a candidate that no declared detection matches.
    NotDeclared { candidate: usize, class_index: ClassIndex },
}

impl fmt::Display for ConsistencyDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SubThreshold { detection, score, threshold } => write!(
                f,
                "sub-threshold detection: detections[{detection}] score {score} below {threshold}"
            ),
            Self::NotReplayed { detection, class_index } => write!(
                f,
                "detections[{detection}] (class {class_index}) absent from NMS replay"
            ),
            Self::NotDeclared { candidate, class_index } => write!(
                f,
                "NMS replay keeps refined[{candidate}] as class {class_index} but no declared detection matches"
            ),
        }
    }
}

/// Compares declared detections against `nms::replay` over the refined candidates.
pub fn validate_consistency(
    image: &ImageIntrospection,
    catalog: &ClassCatalog,
    cfg: &NmsConfig,
) -> Vec<ConsistencyDiagnostic> {
    let mut out = Vec::new();
    for (i, d) in image.detections.iter().enumerate() {
        if d.score < cfg.score_threshold {
            out.push(ConsistencyDiagnostic::SubThreshold {
                detection: i,
                score: d.score,
                threshold: cfg.score_threshold,
            });
        }
    }

    let replayed = replay(&image.refined, catalog, cfg);
    let mut taken = vec![false; replayed.len()];
    for (i, d) in image.detections.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, r) in replayed.iter().enumerate() {
            if taken[k] || r.class_index != d.class_index {
                continue;
            }
            let v = iou(&d.bbox, &r.bbox);
            if v >= REPLAY_MATCH_IOU && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        match best {
            Some((k, _)) => taken[k] = true,
            None => out.push(ConsistencyDiagnostic::NotReplayed {
                detection: i,
                class_index: d.class_index,
            }),
        }
    }
    for (k, r) in replayed.iter().enumerate() {
        if !taken[k] {
            out.push(ConsistencyDiagnostic::NotDeclared {
                candidate: r.source_candidate.expect("replay sets source_candidate"),
                class_index: r.class_index,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::interchange::{Detection, Proposal, RefinedCandidate, ScoreVector};

    fn fixture() -> (ImageIntrospection, ClassCatalog) {
        let catalog = ClassCatalog::new(vec!["a".into(), "b".into()], true).unwrap();
        let mut img = ImageIntrospection::empty("x", 100, 100);
        let boxes = [[0.0, 0.0, 10.0, 10.0], [1.0, 0.0, 11.0, 10.0], [50.0, 50.0, 60.0, 70.0]];
        let scores = [[0.9, 0.05, 0.05], [0.8, 0.1, 0.1], [0.2, 0.6, 0.2]];
        for (i, (b, s)) in boxes.iter().zip(scores).enumerate() {
            img.proposals.push(Proposal {
                id: i as u64,
                bbox: BBox::try_from(*b).unwrap(),
                objectness: None,
            });
            img.refined.push(RefinedCandidate {
                proposal_id: i as u64,
                bbox: BBox::try_from(*b).unwrap(),
                scores: ScoreVector::new(s.to_vec()),
                class_specific_for: None,
            });
        }
        img.detections = replay(&img.refined, &catalog, &NmsConfig::default());
        (img, catalog)
    }

    #[test]
    fn replay_consistent_image_has_no_diagnostics() {
        let (img, catalog) = fixture();
        assert_eq!(img.detections.len(), 2);
        assert!(validate_consistency(&img, &catalog, &NmsConfig::default()).is_empty());
    }

    #[test]
    fn extra_declared_detection_is_one_diagnostic() {
        let (mut img, catalog) = fixture();
        img.detections.push(Detection {
            bbox: BBox::new(80.0, 80.0, 90.0, 90.0).unwrap(),
            class_index: 1,
            score: 0.7,
            source_candidate: None,
        });
        let diags = validate_consistency(&img, &catalog, &NmsConfig::default());
        assert_eq!(diags, vec![ConsistencyDiagnostic::NotReplayed { detection: 2, class_index: 1 }]);
    }

    #[test]
    fn duplicate_declared_detection_is_one_diagnostic() {
        let (mut img, catalog) = fixture();
        let dup = img.detections[0].clone();
        img.detections.push(dup);
        assert_eq!(validate_consistency(&img, &catalog, &NmsConfig::default()).len(), 1);
    }

    #[test]
    fn missing_declared_detection_reported() {
        let (mut img, catalog) = fixture();
        img.detections.remove(0);
        let diags = validate_consistency(&img, &catalog, &NmsConfig::default());
        assert_eq!(diags, vec![ConsistencyDiagnostic::NotDeclared { candidate: 0, class_index: 1 }]);
    }

    #[test]
    fn sub_threshold_detection_flagged() {
        let (mut img, catalog) = fixture();
        img.detections.push(Detection {
            bbox: BBox::new(80.0, 80.0, 90.0, 90.0).unwrap(),
            class_index: 2,
            score: 0.1,
            source_candidate: None,
        });
        let diags = validate_consistency(&img, &catalog, &NmsConfig::new(0.5, 0.3));
        assert!(diags
            .iter()
            .any(|d| matches!(d, ConsistencyDiagnostic::SubThreshold { detection: 2, .. })));
        assert!(diags[0].to_string().starts_with("sub-threshold detection"));
    }
}
