//! Axis-aligned boxes and IOU arithmetic, generic over the scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Axis-aligned box in input-image pixels, origin top-left, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<F> {
    pub x1: F,
    pub y1: F,
    pub x2: F,
    pub y2: F,
}

impl<F: Real> BoundingBox<F> {
    pub fn new(x1: F, y1: F, x2: F, y2: F) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::argument(format!(
                "degenerate box ({x1},{y1},{x2},{y2}): requires x1 < x2 and y1 < y2"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    /// Unchecked constructor for internal arithmetic that may transiently
    /// produce empty boxes (e.g. crop clipping).
    pub fn raw(x1: F, y1: F, x2: F, y2: F) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn raw_tuple(&self) -> (F, F, F, F) {
        (self.x1, self.y1, self.x2, self.y2)
    }

    pub fn width(&self) -> F {
        self.x2 - self.x1
    }

    pub fn height(&self) -> F {
        self.y2 - self.y1
    }

    pub fn area(&self) -> F {
        let w = (self.x2 - self.x1).max(F::zero());
        let h = (self.y2 - self.y1).max(F::zero());
        w * h
    }

    pub fn center(&self) -> (F, F) {
        let two = F::real(2.0);
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    /// Strict interior test (points on the boundary are outside).
    pub fn contains_strict(&self, x: F, y: F) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, other: &Self) -> F {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(F::zero());
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(F::zero());
        ix * iy
    }

    pub fn iou(&self, other: &Self) -> F {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= F::zero() {
            F::zero()
        } else {
            inter / union
        }
    }

    /// Clamp to the rectangle [0, w] x [0, h]. May produce an empty box.
    pub fn clamped(&self, w: F, h: F) -> Self {
        BoundingBox {
            x1: self.x1.max(F::zero()).min(w),
            y1: self.y1.max(F::zero()).min(h),
            x2: self.x2.max(F::zero()).min(w),
            y2: self.y2.max(F::zero()).min(h),
        }
    }

    /// Box scaled about its own center by `factor` per axis.
    pub fn scaled_about_center(&self, factor: F) -> Self {
        let (cx, cy) = self.center();
        let two = F::real(2.0);
        let hw = self.width() * factor / two;
        let hh = self.height() * factor / two;
        BoundingBox {
            x1: cx - hw,
            y1: cy - hh,
            x2: cx + hw,
            y2: cy + hh,
        }
    }

    /// Mirror about the vertical axis of an image of width `img_w`.
    pub fn flipped_h(&self, img_w: F) -> Self {
        BoundingBox {
            x1: img_w - self.x2,
            y1: self.y1,
            x2: img_w - self.x1,
            y2: self.y2,
        }
    }

    pub fn cast<G: Real>(&self) -> BoundingBox<G> {
        BoundingBox {
            x1: G::real(self.x1.to_f64_()),
            y1: G::real(self.y1.to_f64_()),
            x2: G::real(self.x2.to_f64_()),
            y2: G::real(self.y2.to_f64_()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BoundingBox::new(1.0f64, 2.0, 5.0, 6.0).unwrap();
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BoundingBox::new(0.0f64, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // two unit-height boxes overlapping half their width
        let a = BoundingBox::new(0.0f64, 0.0, 2.0, 1.0).unwrap();
        let b = BoundingBox::new(1.0, 0.0, 3.0, 1.0).unwrap();
        // inter = 1, union = 3
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(2.0f32, 0.0, 2.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0f32, 3.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn strict_containment_excludes_boundary() {
        let b = BoundingBox::new(0.0f64, 0.0, 4.0, 4.0).unwrap();
        assert!(b.contains_strict(2.0, 2.0));
        assert!(!b.contains_strict(0.0, 2.0));
        assert!(!b.contains_strict(2.0, 4.0));
    }

    #[test]
    fn flip_mirror_arithmetic() {
        let b = BoundingBox::new(10.0f64, 10.0, 20.0, 20.0).unwrap();
        let f = b.flipped_h(100.0);
        assert_eq!((f.x1, f.y1, f.x2, f.y2), (80.0, 10.0, 90.0, 20.0));
    }
}
