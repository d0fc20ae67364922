//! Black-box false-negative error typing from final detections.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou;
use crate::interchange::{GroundTruthObject, ImageIntrospection};
use crate::matching::{detection_order, DetectionLabel, MatchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TideFnType {
    Cls,
    Loc,
    ClsLoc,
    Missed,
}

impl TideFnType {
    /// Row order used by reports.
    pub const ALL: [TideFnType; 4] = [TideFnType::Cls, TideFnType::Loc, TideFnType::ClsLoc, TideFnType::Missed];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TideFnType::Cls => "Cls",
            TideFnType::Loc => "Loc",
            TideFnType::ClsLoc => "Cls+Loc",
            TideFnType::Missed => "Missed",
        }
    }
}

impl fmt::Display for TideFnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TideThresholds {
    /// Foreground IoU: at or above this a detection localizes the object.
    pub t_fg: f64,
    /// Background IoU: below this a detection does not overlap the object.
    pub t_bg: f64,
}

impl Default for TideThresholds {
    fn default() -> Self {
        Self { t_fg: 0.5, t_bg: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TideError {
    #[error("ground truth {0} is not a false negative")]
    NotFalseNegative(u64),
    #[error("ground truth {0} is not part of this image")]
    UnknownGroundTruth(u64),
    #[error("t_bg ({t_bg}) must be below t_fg ({t_fg})")]
    BadThresholds { t_fg: f64, t_bg: f64 },
}

/// Types one false negative by the most confident unmatched detection that explains it.
///
/// Only false-positive detections are scanned (a detection already matched to
/// another object is not an error for this one), in descending score order.
pub fn classify_tide(
    gt: &GroundTruthObject,
    image: &ImageIntrospection,
    matched: &MatchResult,
    thresholds: &TideThresholds,
) -> Result<TideFnType, TideError> {
    let TideThresholds { t_fg, t_bg } = *thresholds;
    if t_bg.partial_cmp(&t_fg) != Some(std::cmp::Ordering::Less) {
        return Err(TideError::BadThresholds { t_fg, t_bg });
    }
    let gt_index = image
        .ground_truth
        .iter()
        .position(|g| g.id == gt.id)
        .ok_or(TideError::UnknownGroundTruth(gt.id))?;
    if !matched.is_false_negative(gt_index) {
        return Err(TideError::NotFalseNegative(gt.id));
    }

    for d in detection_order(&image.detections) {
        if matched.detections[d] != DetectionLabel::FalsePositive {
            continue;
        }
        let det = &image.detections[d];
        let overlap = iou(&gt.bbox, &det.bbox);
        let same_class = det.class_index == gt.class_index;
        if overlap >= t_fg && !same_class {
            return Ok(TideFnType::Cls);
        }
        if overlap >= t_bg && overlap < t_fg {
            return Ok(if same_class { TideFnType::Loc } else { TideFnType::ClsLoc });
        }
    }
    Ok(TideFnType::Missed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::interchange::Detection;
    use crate::matching::match_image;

    fn setup(dets: Vec<(f64, [f64; 4], u32)>) -> (ImageIntrospection, MatchResult) {
        let mut img = ImageIntrospection::empty("i", 100, 100);
        img.ground_truth.push(GroundTruthObject {
            id: 1,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            class_index: 1,
            ignore: false,
        });
        img.detections = dets
            .into_iter()
            .map(|(score, b, c)| Detection {
                bbox: BBox::try_from(b).unwrap(),
                class_index: c,
                score,
                source_candidate: None,
            })
            .collect();
        let m = match_image(&img, 0.5);
        (img, m)
    }

    fn run(dets: Vec<(f64, [f64; 4], u32)>) -> Result<TideFnType, TideError> {
        let (img, m) = setup(dets);
        classify_tide(&img.ground_truth[0], &img, &m, &TideThresholds::default())
    }

    #[test]
    fn no_detections_is_missed() {
        assert_eq!(run(vec![]), Ok(TideFnType::Missed));
    }

    #[test]
    fn wrong_class_high_overlap_is_cls() {
        // IoU 0.9
        assert_eq!(run(vec![(0.8, [0.0, 0.0, 10.0, 9.0], 2)]), Ok(TideFnType::Cls));
    }

    #[test]
    fn right_class_poor_overlap_is_loc() {
        // IoU 0.3: [0,0,10,10] vs [0,0,10,3]
        assert_eq!(run(vec![(0.8, [0.0, 0.0, 10.0, 3.0], 1)]), Ok(TideFnType::Loc));
    }

    #[test]
    fn wrong_class_poor_overlap_is_cls_loc() {
        assert_eq!(run(vec![(0.8, [0.0, 0.0, 10.0, 3.0], 2)]), Ok(TideFnType::ClsLoc));
    }

    #[test]
    fn below_background_threshold_is_missed() {
        // IoU 0.05
        assert_eq!(run(vec![(0.8, [0.0, 0.0, 10.0, 0.5], 1)]), Ok(TideFnType::Missed));
    }

    #[test]
    fn highest_score_decides() {
        let dets = vec![(0.6, [0.0, 0.0, 10.0, 9.0], 2), (0.9, [0.0, 0.0, 10.0, 3.0], 1)];
        assert_eq!(run(dets), Ok(TideFnType::Loc));
    }

    #[test]
    fn detected_gt_is_rejected() {
        assert_eq!(
            run(vec![(0.9, [0.0, 0.0, 10.0, 10.0], 1)]),
            Err(TideError::NotFalseNegative(1))
        );
    }

    #[test]
    fn raising_t_bg_only_adds_missed() {
        let dets = vec![(0.8, [0.0, 0.0, 10.0, 2.0], 1)]; // IoU 0.2
        let (img, m) = setup(dets);
        let low = classify_tide(&img.ground_truth[0], &img, &m, &TideThresholds { t_fg: 0.5, t_bg: 0.1 });
        let high = classify_tide(&img.ground_truth[0], &img, &m, &TideThresholds { t_fg: 0.5, t_bg: 0.3 });
        assert_eq!(low, Ok(TideFnType::Loc));
        assert_eq!(high, Ok(TideFnType::Missed));
    }
}
