//! Axis-aligned bounding boxes in normalized image coordinates.
//!
//! Every coordinate is a fraction of the image width or height, so `(0.5, 0.5, 1, 1)`
//! in center form covers the whole image. Two representations exist: [`BBoxCenter`]
//! (the darknet label convention) and [`BBoxCorner`] (convenient for overlap arithmetic).

use serde::{Deserialize, Serialize};

/// Center/size form: `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxCenter {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form: top-left `(x1, y1)` and bottom-right `(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxCorner {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBoxCenter {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// True when the center lies in `[0,1]²` and both sides are nonnegative and finite.
    pub fn is_well_formed(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.cx)
            && unit(self.cy)
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn to_corner(&self) -> BBoxCorner {
        center_to_corner(self)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

impl BBoxCorner {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_center(&self) -> BBoxCenter {
        corner_to_center(self)
    }

    /// Area, with inverted extents counted as zero.
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

pub fn center_to_corner(b: &BBoxCenter) -> BBoxCorner {
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    BBoxCorner::new(b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh)
}

pub fn corner_to_center(b: &BBoxCorner) -> BBoxCenter {
    BBoxCenter::new(
        (b.x1 + b.x2) / 2.0,
        (b.y1 + b.y2) / 2.0,
        b.x2 - b.x1,
        b.y2 - b.y1,
    )
}

/// Area of the overlap rectangle (zero when disjoint).
pub fn intersection_area(a: &BBoxCorner, b: &BBoxCorner) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        0.0
    } else {
        iw * ih
    }
}

/// Intersection over union. Zero for disjoint boxes and for a zero-area union.
pub fn iou(a: &BBoxCorner, b: &BBoxCorner) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two center-form boxes.
pub fn iou_center(a: &BBoxCenter, b: &BBoxCenter) -> f64 {
    iou(&a.to_corner(), &b.to_corner())
}

/// IoU of two `(w, h)` shapes placed on a common center, the anchor clustering metric.
pub fn wh_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (aw, ah) = (a.0.max(0.0), a.1.max(0.0));
    let (bw, bh) = (b.0.max(0.0), b.1.max(0.0));
    let inter = aw.min(bw) * ah.min(bh);
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn full_image_center_to_corner() {
        let c = center_to_corner(&BBoxCenter::new(0.5, 0.5, 1.0, 1.0));
        assert_eq!(c, BBoxCorner::new(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn center_to_corner_arithmetic() {
        let c = center_to_corner(&BBoxCenter::new(0.5, 0.5, 0.2, 0.4));
        assert!(close(c.x1, 0.4, 1e-15));
        assert!(close(c.y1, 0.3, 1e-15));
        assert!(close(c.x2, 0.6, 1e-15));
        assert!(close(c.y2, 0.7, 1e-15));
    }

    #[test]
    fn iou_identical_disjoint_and_overlap() {
        let a = BBoxCorner::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBoxCorner::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let v = iou(
            &BBoxCorner::new(0.0, 0.0, 2.0, 2.0),
            &BBoxCorner::new(1.0, 1.0, 3.0, 3.0),
        );
        assert!(close(v, 1.0 / 7.0, 1e-15));
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = BBoxCorner::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(&p, &p), 0.0);
        // touching edges
        let a = BBoxCorner::new(0.0, 0.0, 1.0, 1.0);
        let b = BBoxCorner::new(1.0, 0.0, 2.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn wh_iou_cases() {
        assert_eq!(wh_iou((0.3, 0.2), (0.3, 0.2)), 1.0);
        assert!(close(wh_iou((1.0, 1.0), (2.0, 2.0)), 0.25, 1e-15));
        assert_eq!(wh_iou((0.0, 0.0), (0.4, 0.1)), 0.0);
        // cross-check against iou() on co-centered corner boxes
        let a = BBoxCenter::new(0.0, 0.0, 1.0, 1.0);
        let b = BBoxCenter::new(0.0, 0.0, 2.0, 2.0);
        assert!(close(iou_center(&a, &b), 0.25, 1e-15));
    }

    fn arb_center() -> impl Strategy<Value = BBoxCenter> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.5f64, 0.0..=1.5f64)
            .prop_map(|(cx, cy, w, h)| BBoxCenter::new(cx, cy, w, h))
    }

    fn arb_corner() -> impl Strategy<Value = BBoxCorner> {
        (-1.0..1.0f64, -1.0..1.0f64, 0.0..1.5f64, 0.0..1.5f64)
            .prop_map(|(x, y, w, h)| BBoxCorner::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn center_corner_roundtrip(b in arb_center()) {
            let back = corner_to_center(&center_to_corner(&b));
            prop_assert!(close(back.cx, b.cx, 1e-12));
            prop_assert!(close(back.cy, b.cy, 1e-12));
            prop_assert!(close(back.w, b.w, 1e-12));
            prop_assert!(close(back.h, b.h, 1e-12));
        }

        #[test]
        fn corner_form_invariants(b in arb_center()) {
            let c = b.to_corner();
            prop_assert!(c.x1 <= c.x2 && c.y1 <= c.y2);
            prop_assert!(c.area() >= 0.0);
        }

        #[test]
        fn iou_symmetric_bounded(a in arb_corner(), b in arb_corner()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_scale_invariant(a in arb_corner(), b in arb_corner(), s in 0.01..100.0f64) {
            prop_assert!(close(iou(&a, &b), iou(&a.scale(s), &b.scale(s)), 1e-12));
        }

        #[test]
        fn wh_iou_matches_cocentered_iou(aw in 0.0..2.0f64, ah in 0.0..2.0f64, bw in 0.0..2.0f64, bh in 0.0..2.0f64) {
            let a = BBoxCenter::new(0.5, 0.5, aw, ah);
            let b = BBoxCenter::new(0.5, 0.5, bw, bh);
            prop_assert!(close(wh_iou((aw, ah), (bw, bh)), iou_center(&a, &b), 1e-12));
        }
    }
}
