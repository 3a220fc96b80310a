use rand::Rng;

use crate::boxes::{sanitize, BBox};

/// Greedy non-maximum suppression. Visits boxes by descending score (ties by
/// lower index) and drops any box whose IoU with an already kept box exceeds
/// `iou_thresh`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let order = sort_by_score(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Indices by descending score; equal scores keep ascending index order.
pub fn sort_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Perturbs each boundary by an independent uniform fraction of the box
/// width (x) or height (y), then clips to the image.
pub fn jitter_box(b: &BBox, range: (f64, f64), image_size: f64, rng: &mut impl Rng) -> BBox {
    if range.0 == range.1 {
        return jitter_with(b, [range.0; 4], image_size);
    }
    let draws: [f64; 4] = std::array::from_fn(|_| rng.random_range(range.0..=range.1));
    jitter_with(b, draws, image_size)
}

/// Deterministic core of [`jitter_box`] for given per-boundary fractions.
pub fn jitter_with(b: &BBox, fractions: [f64; 4], image_size: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let moved = BBox::new(
        b.x1 + fractions[0] * w,
        b.y1 + fractions[1] * h,
        b.x2 + fractions[2] * w,
        b.y2 + fractions[3] * h,
    );
    sanitize(moved, image_size, image_size, 1.0)
}
