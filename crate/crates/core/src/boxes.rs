//! Axis-aligned boxes in pixel coordinates `(x1, y1, x2, y2)`.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    /// Strictly positive extent and finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Mirror about the vertical center line of an image of `width`.
    pub fn hflip(&self, width: f64) -> BBox {
        BBox::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 for disjoint or empty boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).min(1.0)
        }
    }
}

/// Offsets of the four boundaries of `target` relative to `reference`,
/// normalized by the reference width (x) and height (y) and multiplied by
/// `scale`.
pub fn encode_boundaries(reference: &BBox, target: &BBox, scale: f64) -> [f64; 4] {
    let (w, h) = (reference.width(), reference.height());
    [
        scale * (target.x1 - reference.x1) / w,
        scale * (target.y1 - reference.y1) / h,
        scale * (target.x2 - reference.x2) / w,
        scale * (target.y2 - reference.y2) / h,
    ]
}

/// Inverse of [`encode_boundaries`].
pub fn decode_boundaries(reference: &BBox, offsets: &[f64], scale: f64) -> BBox {
    let (w, h) = (reference.width(), reference.height());
    BBox::new(
        reference.x1 + offsets[0] * w / scale,
        reference.y1 + offsets[1] * h / scale,
        reference.x2 + offsets[2] * w / scale,
        reference.y2 + offsets[3] * h / scale,
    )
}

/// Decoded box made valid: clipped to the image and widened to at least
/// `min_side` where it collapsed.
pub fn sanitize(b: BBox, width: f64, height: f64, min_side: f64) -> BBox {
    let mut c = b.clip(width, height);
    let fix = |lo: &mut f64, hi: &mut f64, limit: f64| {
        if *hi - *lo < min_side {
            let mid = ((*lo + *hi) / 2.0).clamp(min_side / 2.0, limit - min_side / 2.0);
            *lo = mid - min_side / 2.0;
            *hi = mid + min_side / 2.0;
        }
    };
    fix(&mut c.x1, &mut c.x2, width);
    fix(&mut c.y1, &mut c.y2, height);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((a.iou(&BBox::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn flip_example() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).hflip(64.0);
        assert_eq!(b, BBox::new(44.0, 10.0, 54.0, 20.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..60.0, 0.0f64..60.0, 0.5f64..30.0, 0.5f64..30.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (a.iou(&b), b.iou(&a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn boundary_coding_inverts(a in arb_box(), b in arb_box()) {
            let t = encode_boundaries(&a, &b, 5.0);
            let d = decode_boundaries(&a, &t, 5.0);
            for (x, y) in d.coords().iter().zip(b.coords()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn sanitize_is_valid(x1 in -20.0f64..80.0, y1 in -20.0f64..80.0, dx in -10.0f64..40.0, dy in -10.0f64..40.0) {
            let b = sanitize(BBox::new(x1, y1, x1 + dx, y1 + dy), 64.0, 64.0, 1.0);
            prop_assert!(b.is_valid() && b.within(64.0, 64.0));
        }
    }
}
