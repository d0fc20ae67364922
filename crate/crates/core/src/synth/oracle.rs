//! Brute-force evaluator for the five mechanism predicates.
//!
//! Deliberately written against plain arrays with its own overlap arithmetic
//! so it shares nothing with [`crate::mechanism`] beyond the label enum. Each
//! predicate is evaluated on its own from set definitions; exactly one must
//! hold for any input.

use crate::mechanism::MechanismLabel;

/// `[x1, y1, x2, y2]`.
pub type RawBox = [f64; 4];

/// One refined candidate: box and target-class scores (background entry excluded).
#[derive(Debug, Clone, Copy)]
pub struct OracleCandidate<'a> {
    pub bbox: RawBox,
    pub target_scores: &'a [f64],
}

fn overlap(a: &RawBox, b: &RawBox) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Truth values of all five predicates, in [`MechanismLabel::ALL`] order.
pub fn predicates(
    gt: &RawBox,
    class_index: usize,
    refined: &[OracleCandidate<'_>],
    proposals: impl IntoIterator<Item = RawBox>,
    theta_loc: f64,
    theta_cls: f64,
) -> [bool; 5] {
    let localized: Vec<&OracleCandidate<'_>> = refined.iter().filter(|r| overlap(gt, &r.bbox) >= theta_loc).collect();
    let proposal_hit = proposals.into_iter().any(|p| overlap(gt, &p) >= theta_loc);

    let some_localized = !localized.is_empty();
    let correct_hit = localized.iter().any(|r| r.target_scores[class_index - 1] >= theta_cls);
    let any_hit = localized.iter().any(|r| r.target_scores.iter().any(|&s| s >= theta_cls));
    let none_hit = localized.iter().all(|r| r.target_scores.iter().all(|&s| s < theta_cls));

    [
        !some_localized && !proposal_hit,
        !some_localized && proposal_hit,
        some_localized && none_hit,
        some_localized && correct_hit,
        some_localized && !correct_hit && any_hit,
    ]
}

/// The unique label whose predicate holds, or `None` if the predicates do not partition.
pub fn oracle_label(
    gt: &RawBox,
    class_index: usize,
    refined: &[OracleCandidate<'_>],
    proposals: impl IntoIterator<Item = RawBox>,
    theta_loc: f64,
    theta_cls: f64,
) -> Option<MechanismLabel> {
    let p = predicates(gt, class_index, refined, proposals, theta_loc, theta_cls);
    let mut hits = MechanismLabel::ALL.iter().zip(p).filter(|(_, b)| *b);
    let first = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some(*first.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: RawBox = [0.0, 0.0, 10.0, 10.0];

    fn label(refined: &[(RawBox, [f64; 2])], proposals: &[RawBox]) -> Option<MechanismLabel> {
        let cands: Vec<OracleCandidate<'_>> = refined
            .iter()
            .map(|(b, s)| OracleCandidate {
                bbox: *b,
                target_scores: s,
            })
            .collect();
        oracle_label(&G, 1, &cands, proposals.iter().copied(), 0.5, 0.3)
    }

    #[test]
    fn hand_cases() {
        use MechanismLabel::*;
        assert_eq!(label(&[(G, [0.9, 0.05])], &[]), Some(ClassifierCalibration));
        assert_eq!(label(&[([0.0, 0.0, 12.5, 10.0], [0.1, 0.7])], &[]), Some(InterclassClassification));
        assert_eq!(label(&[([0.0, 0.0, 12.5, 10.0], [0.1, 0.2])], &[]), Some(BackgroundClassification));
        assert_eq!(label(&[([0.0, 0.0, 25.0, 10.0], [0.9, 0.0])], &[[0.0, 0.0, 10.0, 6.0]]), Some(Regressor));
        assert_eq!(label(&[], &[[0.0, 0.0, 10.0, 4.0]]), Some(ProposalProcess));
        assert_eq!(label(&[], &[]), Some(ProposalProcess));
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(overlap(&G, &[10.0, 0.0, 20.0, 10.0]), 0.0);
    }
}
