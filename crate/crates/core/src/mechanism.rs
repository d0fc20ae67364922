//! False-negative mechanism attribution.
//!
//! Given a ground-truth object that the final detections missed, decide which
//! pipeline step lost it by looking at the detector's internals:
//!
//! 1. If some regressor-refined box localizes the object (`IoU >= θ_loc`),
//!    the failure is in classification or suppression. Among the localized
//!    candidates:
//!    * a correct-class score `>= θ_cls` means a correct detection existed and
//!      was suppressed: **classifier calibration**;
//!    * otherwise any target-class score `>= θ_cls` means the object was taken
//!      for another class: **interclass classification**;
//!    * otherwise every localized candidate was called background:
//!      **background classification**.
//! 2. Otherwise, if some proposal localizes the object, the regressor moved
//!    it away: **regressor**.
//! 3. Otherwise nothing ever proposed the object: **proposal process**.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Thresholds;
use crate::geometry::{iou, iou_many};
use crate::interchange::{
    AnchorCache, ClassIndex, DumpHeader, GroundTruthObject, ImageIntrospection, ProposalBoxes, RefinedCandidate,
};
use crate::matching::{match_image, MatchResult};
use crate::tide::{classify_tide, TideError, TideFnType, TideThresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MechanismLabel {
    ProposalProcess,
    Regressor,
    BackgroundClassification,
    ClassifierCalibration,
    InterclassClassification,
}

impl MechanismLabel {
    /// Column order used by reports: Prop, Reg, Bkg, Cal, Inter.
    pub const ALL: [MechanismLabel; 5] = [
        MechanismLabel::ProposalProcess,
        MechanismLabel::Regressor,
        MechanismLabel::BackgroundClassification,
        MechanismLabel::ClassifierCalibration,
        MechanismLabel::InterclassClassification,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            MechanismLabel::ProposalProcess => "Prop",
            MechanismLabel::Regressor => "Reg",
            MechanismLabel::BackgroundClassification => "Bkg",
            MechanismLabel::ClassifierCalibration => "Cal",
            MechanismLabel::InterclassClassification => "Inter",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MechanismLabel::ProposalProcess => "Proposal Process",
            MechanismLabel::Regressor => "Regressor",
            MechanismLabel::BackgroundClassification => "Background Classification",
            MechanismLabel::ClassifierCalibration => "Classifier Calibration",
            MechanismLabel::InterclassClassification => "Interclass Classification",
        }
    }
}

impl fmt::Display for MechanismLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The quantities behind one attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismEvidence {
    /// Best IoU over refined boxes; 0 when there are none.
    pub best_refined_iou: f64,
    /// Best IoU over proposals, computed only when no refined box localized the object.
    pub best_proposal_iou: Option<f64>,
    /// Objectness of the best-IoU proposal, when the dump records it.
    pub best_proposal_objectness: Option<f64>,
    /// Indices into `refined` of the candidates with `IoU >= θ_loc`.
    pub localized_candidates: Vec<usize>,
    /// Highest correct-class score among localized candidates.
    pub max_correct_class_score: Option<f64>,
    /// Highest other-class score among localized candidates, with its class.
    pub max_wrong_class: Option<(f64, ClassIndex)>,
    pub theta_loc: f64,
    pub theta_cls: f64,
    /// No refined boxes and no proposals at all.
    pub vacuous_pipeline: bool,
}

impl MechanismEvidence {
    /// Whether these quantities imply `label` under the recorded thresholds.
    pub fn is_consistent_with(&self, label: MechanismLabel) -> bool {
        let localized = !self.localized_candidates.is_empty();
        if localized != (self.best_refined_iou >= self.theta_loc) {
            return false;
        }
        let correct = self.max_correct_class_score.is_some_and(|s| s >= self.theta_cls);
        let wrong = self.max_wrong_class.is_some_and(|(s, _)| s >= self.theta_cls);
        let proposal = self.best_proposal_iou.is_some_and(|v| v >= self.theta_loc);
        match label {
            MechanismLabel::ClassifierCalibration => localized && correct,
            MechanismLabel::InterclassClassification => localized && !correct && wrong,
            MechanismLabel::BackgroundClassification => localized && !correct && !wrong,
            MechanismLabel::Regressor => !localized && self.best_proposal_iou.is_some() && proposal,
            MechanismLabel::ProposalProcess => {
                !localized && !proposal && (self.best_proposal_iou.is_some() || self.vacuous_pipeline)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechanismError {
    #[error("ground truth {0} is not a false negative")]
    NotFalseNegative(u64),
    #[error("ground truth {0} is not part of this image")]
    UnknownGroundTruth(u64),
    #[error(transparent)]
    Tide(#[from] TideError),
}

/// Attribution over raw sets, with no false-negative check.
pub fn attribute(
    gt: &GroundTruthObject,
    refined: &[RefinedCandidate],
    proposals: &ProposalBoxes<'_>,
    num_classes: usize,
    thresholds: &Thresholds,
) -> (MechanismLabel, MechanismEvidence) {
    let Thresholds { theta_loc, theta_cls } = *thresholds;
    let c = gt.class_index;
    let mut ev = MechanismEvidence {
        best_refined_iou: 0.0,
        best_proposal_iou: None,
        best_proposal_objectness: None,
        localized_candidates: Vec::new(),
        max_correct_class_score: None,
        max_wrong_class: None,
        theta_loc,
        theta_cls,
        vacuous_pipeline: refined.is_empty() && proposals.is_empty(),
    };

    let refined_iou = iou_many(&gt.bbox, refined.iter().map(|r| &r.bbox));
    ev.best_refined_iou = refined_iou.iter().copied().fold(0.0, f64::max);

    if refined_iou.iter().any(|&v| v >= theta_loc) {
        ev.localized_candidates = (0..refined.len()).filter(|&i| refined_iou[i] >= theta_loc).collect();
        let localized: Vec<&[f64]> = ev
            .localized_candidates
            .iter()
            .map(|&i| refined[i].scores.target_scores(num_classes))
            .collect();

        for s in &localized {
            let correct = s[c as usize - 1];
            ev.max_correct_class_score = Some(ev.max_correct_class_score.map_or(correct, |m| m.max(correct)));
            for (j, &v) in s.iter().enumerate() {
                let class = j as ClassIndex + 1;
                if class != c && ev.max_wrong_class.is_none_or(|(m, _)| v > m) {
                    ev.max_wrong_class = Some((v, class));
                }
            }
        }

        let label = if localized.iter().any(|s| s[c as usize - 1] >= theta_cls) {
            MechanismLabel::ClassifierCalibration
        } else if localized.iter().any(|s| s.iter().any(|&v| v >= theta_cls)) {
            MechanismLabel::InterclassClassification
        } else {
            MechanismLabel::BackgroundClassification
        };
        return (label, ev);
    }

    let mut best: Option<(f64, Option<f64>)> = None;
    for (b, objectness) in proposals.iter() {
        let v = iou(&gt.bbox, &b);
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, objectness));
        }
    }
    ev.best_proposal_iou = Some(best.map_or(0.0, |b| b.0));
    ev.best_proposal_objectness = best.and_then(|b| b.1);

    let label = if ev.best_proposal_iou.is_some_and(|v| v >= theta_loc) {
        MechanismLabel::Regressor
    } else {
        MechanismLabel::ProposalProcess
    };
    (label, ev)
}

/// Attributes `gt` after checking it is a false negative under `matched`.
pub fn classify_matched(
    gt_index: usize,
    image: &ImageIntrospection,
    matched: &MatchResult,
    proposals: &ProposalBoxes<'_>,
    num_classes: usize,
    thresholds: &Thresholds,
) -> Result<(MechanismLabel, MechanismEvidence), MechanismError> {
    let gt = &image.ground_truth[gt_index];
    if !matched.is_false_negative(gt_index) {
        return Err(MechanismError::NotFalseNegative(gt.id));
    }
    Ok(attribute(gt, &image.refined, proposals, num_classes, thresholds))
}

/// Attributes one false negative, matching the image at the same `θ_loc` first.
pub fn classify_fn(
    gt_id: u64,
    image: &ImageIntrospection,
    header: &DumpHeader,
    anchors: &AnchorCache,
    thresholds: &Thresholds,
) -> Result<(MechanismLabel, MechanismEvidence), MechanismError> {
    let gt_index = image
        .ground_truth
        .iter()
        .position(|g| g.id == gt_id)
        .ok_or(MechanismError::UnknownGroundTruth(gt_id))?;
    let matched = match_image(image, thresholds.theta_loc);
    let proposals = image.proposal_boxes(header, anchors);
    classify_matched(
        gt_index,
        image,
        &matched,
        &proposals,
        header.catalog.num_classes(),
        thresholds,
    )
}

/// One attributed false negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnRecord {
    pub image_id: String,
    pub gt_id: u64,
    pub class_index: ClassIndex,
    pub mechanism: MechanismLabel,
    pub tide: TideFnType,
    pub evidence: MechanismEvidence,
}

/// All false-negative records of one image, in ground-truth order.
pub fn classify_image(
    image: &ImageIntrospection,
    matched: &MatchResult,
    header: &DumpHeader,
    anchors: &AnchorCache,
    thresholds: &Thresholds,
    tide: &TideThresholds,
) -> Result<Vec<FnRecord>, MechanismError> {
    let mut out = Vec::new();
    let mut proposals: Option<ProposalBoxes<'_>> = None;
    for gt_index in matched.false_negatives() {
        let proposals = proposals.get_or_insert_with(|| image.proposal_boxes(header, anchors));
        let (mechanism, evidence) = classify_matched(
            gt_index,
            image,
            matched,
            proposals,
            header.catalog.num_classes(),
            thresholds,
        )?;
        let gt = &image.ground_truth[gt_index];
        out.push(FnRecord {
            image_id: image.image_id.clone(),
            gt_id: gt.id,
            class_index: gt.class_index,
            mechanism,
            tide: classify_tide(gt, image, matched, tide)?,
            evidence,
        });
    }
    Ok(out)
}

/// Attributes every false negative of every image; output follows input order.
pub fn classify_all(
    images: &[ImageIntrospection],
    header: &DumpHeader,
    thresholds: &Thresholds,
    tide: &TideThresholds,
) -> Result<Vec<FnRecord>, MechanismError> {
    let anchors = AnchorCache::new();
    let per_image: Vec<Vec<FnRecord>> = images
        .par_iter()
        .map(|img| {
            let matched = match_image(img, thresholds.theta_loc);
            classify_image(img, &matched, header, &anchors, thresholds, tide)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::interchange::{ClassCatalog, Proposal, ScoreVector};
    use proptest::prelude::*;

    fn header() -> DumpHeader {
        DumpHeader::explicit(ClassCatalog::new(vec!["a".into(), "b".into()], true).unwrap())
    }

    fn gt() -> GroundTruthObject {
        GroundTruthObject {
            id: 1,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            class_index: 1,
            ignore: false,
        }
    }

    /// Box whose IoU with (0,0,10,10) is `t`: same height, width 10 / t anchored at 0.
    fn box_with_iou(t: f64) -> BBox {
        BBox::new(0.0, 0.0, 10.0 / t, 10.0).unwrap()
    }

    fn image(refined: Vec<(BBox, [f64; 2])>, proposals: Vec<BBox>) -> ImageIntrospection {
        let mut img = ImageIntrospection::empty("i", 100, 100);
        img.ground_truth.push(gt());
        img.proposals = proposals
            .into_iter()
            .enumerate()
            .map(|(i, b)| Proposal {
                id: i as u64,
                bbox: b,
                objectness: Some(0.5),
            })
            .collect();
        img.refined = refined
            .into_iter()
            .map(|(b, s)| RefinedCandidate {
                proposal_id: 0,
                bbox: b,
                scores: ScoreVector::new(vec![s[0], s[1], (1.0 - s[0] - s[1]).max(0.0)]),
                class_specific_for: None,
            })
            .collect();
        img
    }

    fn run(img: &ImageIntrospection) -> (MechanismLabel, MechanismEvidence) {
        classify_fn(1, img, &header(), &AnchorCache::new(), &Thresholds::default()).unwrap()
    }

    #[test]
    fn suppressed_correct_candidate_is_calibration() {
        let g = gt().bbox;
        // declared detections are empty: the candidate was suppressed
        let img = image(vec![(g, [0.9, 0.05])], vec![g]);
        let (label, ev) = run(&img);
        assert_eq!(label, MechanismLabel::ClassifierCalibration);
        assert_eq!(ev.localized_candidates, vec![0]);
        assert!(ev.is_consistent_with(label));
    }

    #[test]
    fn wrong_class_localized_is_interclass() {
        let img = image(vec![(box_with_iou(0.8), [0.1, 0.7])], vec![gt().bbox]);
        let (label, ev) = run(&img);
        assert_eq!(label, MechanismLabel::InterclassClassification);
        assert_eq!(ev.max_wrong_class, Some((0.7, 2)));
        assert!(ev.is_consistent_with(label));
    }

    #[test]
    fn low_scores_localized_is_background() {
        let img = image(vec![(box_with_iou(0.8), [0.1, 0.2])], vec![gt().bbox]);
        let (label, ev) = run(&img);
        assert_eq!(label, MechanismLabel::BackgroundClassification);
        assert!(ev.is_consistent_with(label));
    }

    #[test]
    fn proposal_localized_but_refined_not_is_regressor() {
        let img = image(vec![(box_with_iou(0.4), [0.9, 0.0])], vec![box_with_iou(0.6)]);
        let (label, ev) = run(&img);
        assert_eq!(label, MechanismLabel::Regressor);
        assert!((ev.best_proposal_iou.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(ev.best_proposal_objectness, Some(0.5));
        assert!(ev.is_consistent_with(label));
    }

    #[test]
    fn nothing_localized_is_proposal_process() {
        let img = image(vec![(box_with_iou(0.4), [0.9, 0.0])], vec![box_with_iou(0.45)]);
        let (label, ev) = run(&img);
        assert_eq!(label, MechanismLabel::ProposalProcess);
        assert!(!ev.vacuous_pipeline);
        assert!(ev.is_consistent_with(label));
    }

    #[test]
    fn empty_pipeline_is_vacuous_proposal_process() {
        let img = image(vec![], vec![]);
        let (label, ev) = run(&img);
        assert_eq!(label, MechanismLabel::ProposalProcess);
        assert!(ev.vacuous_pipeline);
        assert_eq!(ev.best_proposal_iou, Some(0.0));
    }

    #[test]
    fn thresholds_are_inclusive() {
        let img = image(vec![(box_with_iou(0.5), [0.3, 0.0])], vec![]);
        let mut img = img;
        img.proposals.push(Proposal {
            id: 0,
            bbox: gt().bbox,
            objectness: None,
        });
        assert_eq!(run(&img).0, MechanismLabel::ClassifierCalibration);
    }

    #[test]
    fn detected_object_is_rejected() {
        let g = gt().bbox;
        let mut img = image(vec![(g, [0.9, 0.05])], vec![g]);
        img.detections.push(crate::interchange::Detection {
            bbox: g,
            class_index: 1,
            score: 0.9,
            source_candidate: Some(0),
        });
        let err = classify_fn(1, &img, &header(), &AnchorCache::new(), &Thresholds::default()).unwrap_err();
        assert_eq!(err, MechanismError::NotFalseNegative(1));
    }

    #[test]
    fn classify_all_follows_false_negatives() {
        let g = gt().bbox;
        let mut detected = image(vec![(g, [0.9, 0.05])], vec![g]);
        detected.image_id = "det".into();
        detected.detections.push(crate::interchange::Detection {
            bbox: g,
            class_index: 1,
            score: 0.9,
            source_candidate: Some(0),
        });
        let missed = image(vec![(box_with_iou(0.8), [0.1, 0.2])], vec![g]);
        let recs = classify_all(&[detected, missed], &header(), &Thresholds::default(), &TideThresholds::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image_id, "i");
        assert_eq!(recs[0].mechanism, MechanismLabel::BackgroundClassification);
        assert_eq!(recs[0].tide, TideFnType::Missed);
    }

    fn arb_image() -> impl Strategy<Value = ImageIntrospection> {
        let cand = (0.3..3.0f64, 0.0..1.0f64, 0.0..1.0f64);
        (proptest::collection::vec(cand, 0..6), proptest::collection::vec(0.3..3.0f64, 0..4)).prop_map(
            |(cands, props)| {
                image(
                    cands
                        .into_iter()
                        .map(|(w, a, b)| (BBox::new(0.0, 0.0, 10.0 * w, 10.0).unwrap(), [a, b * (1.0 - a)]))
                        .collect(),
                    props.into_iter().map(|w| BBox::new(0.0, 0.0, 10.0 * w, 10.0).unwrap()).collect(),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn evidence_always_consistent(img in arb_image(), cls in 0.05..0.95f64) {
            let th = Thresholds { theta_loc: 0.5, theta_cls: cls };
            let (label, ev) = classify_fn(1, &img, &header(), &AnchorCache::new(), &th).unwrap();
            prop_assert!(ev.is_consistent_with(label));
            for other in MechanismLabel::ALL {
                if other != label {
                    prop_assert!(!ev.is_consistent_with(other));
                }
            }
        }

        #[test]
        fn raising_theta_cls_only_moves_toward_background(img in arb_image(), lo in 0.05..0.9f64, d in 0.0..0.5f64) {
            let hi = (lo + d).min(0.95);
            let a = classify_fn(1, &img, &header(), &AnchorCache::new(), &Thresholds { theta_loc: 0.5, theta_cls: lo }).unwrap().0;
            let b = classify_fn(1, &img, &header(), &AnchorCache::new(), &Thresholds { theta_loc: 0.5, theta_cls: hi }).unwrap().0;
            use MechanismLabel::*;
            match a {
                ProposalProcess | Regressor => prop_assert_eq!(a, b),
                BackgroundClassification => prop_assert_eq!(b, BackgroundClassification),
                ClassifierCalibration | InterclassClassification => prop_assert!(b != ProposalProcess && b != Regressor),
            }
        }
    }
}
