//! Axis-aligned bounding boxes in continuous corner form.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("non-positive area box ({x1}, {y1}, {x2}, {y2})")]
pub struct DegenerateBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// A rectangle `(x1, y1, x2, y2)` with `x2 > x1` and `y2 > y1`.
///
/// Coordinates are continuous pixels; no `+1` convention is applied to widths.
/// Serializes as the 4-element array `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, DegenerateBox> {
        // NaN fails both comparisons and is rejected here as well.
        if x2 > x1 && y2 > y1 && x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite() {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(DegenerateBox { x1, y1, x2, y2 })
        }
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, DegenerateBox> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Area of the overlap; zero for disjoint or edge-touching boxes.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Multiplies every coordinate by `s`. Panics if `s` is not positive.
    pub fn scaled(&self, s: f64) -> BBox {
        assert!(s > 0.0, "scale factor must be positive");
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
            .expect("positive scaling preserves a valid box")
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
            .expect("translation preserves a valid box")
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = DegenerateBox;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BBox({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. Always in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of `target` against each candidate, in candidate order.
pub fn iou_many<'a, I>(target: &BBox, candidates: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a BBox>,
{
    candidates.into_iter().map(|c| iou(target, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identity_disjoint_and_partial() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 1, union 4 + 4 - 1
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_have_zero_iou() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)), 0.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 1.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(5.0, 5.0, 5.0, 9.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[5, 5, 5, 9]").is_err());
    }

    #[test]
    fn iou_many_examples() {
        let t = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou_many(&t, &[t]), vec![1.0]);
        assert!(iou_many(&t, &[]).is_empty());
        let t = b(0.0, 0.0, 2.0, 2.0);
        let got = iou_many(&t, &[b(1.0, 1.0, 3.0, 3.0), b(0.0, 0.0, 2.0, 2.0)]);
        assert!((got[0] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(got[1], 1.0);
    }

    #[test]
    fn serde_uses_array_form() {
        let s = serde_json::to_string(&b(1.0, 2.0, 3.5, 4.0)).unwrap();
        assert_eq!(s, "[1.0,2.0,3.5,4.0]");
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.01..80.0f64, 0.01..80.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }

        #[test]
        fn containment_ratio(a in arb_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, sw in 0.05..1.0f64, sh in 0.05..1.0f64) {
            let w = a.width() * sw;
            let h = a.height() * sh;
            let x1 = a.x1() + (a.width() - w) * fx;
            let y1 = a.y1() + (a.height() - h) * fy;
            let inner = b(x1, y1, x1 + w, y1 + h);
            prop_assume!(a.contains(&inner));
            let expected = inner.area() / a.area();
            prop_assert!((iou(&inner, &a) - expected).abs() < 1e-9);
        }

        #[test]
        fn scale_invariant(a in arb_box(), c in arb_box(), s in 0.01..100.0f64) {
            let d = (iou(&a, &c) - iou(&a.scaled(s), &c.scaled(s))).abs();
            prop_assert!(d < 1e-12);
        }

        #[test]
        fn iou_many_is_elementwise(t in arb_box(), cs in proptest::collection::vec(arb_box(), 0..20)) {
            let many = iou_many(&t, &cs);
            prop_assert_eq!(many.len(), cs.len());
            for (k, c) in cs.iter().enumerate() {
                prop_assert_eq!(many[k], iou(&t, c));
            }
        }
    }
}
