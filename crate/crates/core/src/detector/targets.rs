//! Training targets for the RPN and the ROI head.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::{encode_boundaries, BBox};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub rpn_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub roi_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_positive_iou: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rpn_per_image: 64,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.5,
            rpn_negative_iou: 0.3,
            roi_per_image: 32,
            roi_positive_fraction: 0.25,
            roi_positive_iou: 0.5,
        }
    }
}

/// A ground-truth or pseudo box. `regress` marks boxes usable as
/// regression targets; all boxes are classification targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
    pub regress: bool,
}

/// Sampled anchors of a batch, indexed globally as `image * anchors + a`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorTargets {
    pub cls_index: Vec<usize>,
    /// 1 for object, 0 for background.
    pub cls_label: Vec<usize>,
    pub reg_index: Vec<usize>,
    /// Four encoded boundary offsets per entry of `reg_index`.
    pub reg_target: Vec<f64>,
}

impl AnchorTargets {
    pub fn extend(&mut self, other: AnchorTargets) {
        self.cls_index.extend(other.cls_index);
        self.cls_label.extend(other.cls_label);
        self.reg_index.extend(other.reg_index);
        self.reg_target.extend(other.reg_target);
    }
}

/// Index of the highest-IoU ground truth (lowest index on ties) and the IoU.
fn best_match(b: &BBox, gts: &[GtBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = b.iou(&g.bbox);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best
}

fn sample(mut pos: Vec<usize>, mut neg: Vec<usize>, total: usize, pos_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    pos.shuffle(rng);
    pos.truncate(((total as f64 * pos_fraction).round() as usize).min(total));
    neg.shuffle(rng);
    neg.truncate(total - pos.len());
    (pos, neg)
}

/// Labels and samples the anchors of one image. Anchors with IoU at least
/// `rpn_positive_iou` to some box, and the best anchor of every box, are
/// positive; anchors below `rpn_negative_iou` to every box are negative.
pub fn assign_anchors(
    anchors: &[BBox],
    gts: &[GtBox],
    image: usize,
    cfg: &SamplingConfig,
    box_scale: f64,
    rng: &mut impl Rng,
) -> AnchorTargets {
    let na = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; na];
    let mut negative = vec![gts.is_empty(); na];
    if !gts.is_empty() {
        let mut best_for_gt = vec![0.0f64; gts.len()];
        let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| a.iou(&g.bbox)).collect()).collect();
        for row in &ious {
            for (j, v) in row.iter().enumerate() {
                best_for_gt[j] = best_for_gt[j].max(*v);
            }
        }
        for (a, row) in ious.iter().enumerate() {
            let (j, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if v >= cfg.rpn_positive_iou {
                matched[a] = Some(j);
            } else if v < cfg.rpn_negative_iou {
                negative[a] = true;
            }
            for (g, &bv) in best_for_gt.iter().enumerate() {
                if bv > 0.0 && row[g] == bv && matched[a].is_none() {
                    matched[a] = Some(g);
                    negative[a] = false;
                }
            }
        }
    }
    let pos: Vec<usize> = (0..na).filter(|&a| matched[a].is_some()).collect();
    let neg: Vec<usize> = (0..na).filter(|&a| negative[a] && matched[a].is_none()).collect();
    let (pos, neg) = sample(pos, neg, cfg.rpn_per_image, cfg.rpn_positive_fraction, rng);
    let mut t = AnchorTargets::default();
    for &a in &pos {
        t.cls_index.push(image * na + a);
        t.cls_label.push(1);
        let g = &gts[matched[a].unwrap_or(0)];
        if g.regress {
            t.reg_index.push(image * na + a);
            t.reg_target.extend(encode_boundaries(&anchors[a], &g.bbox, box_scale));
        }
    }
    for &a in &neg {
        t.cls_index.push(image * na + a);
        t.cls_label.push(0);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub image: usize,
    pub bbox: BBox,
    /// Class id, or the background index for negatives.
    pub label: usize,
    /// IoU with the matched box (0 without boxes).
    pub gt_iou: f64,
    pub reg_target: Option<[f64; 4]>,
}

/// Samples training ROIs of one image from its proposals plus the boxes
/// themselves. ROIs with IoU at least `roi_positive_iou` take the class of
/// the best-matching box; the rest are background.
pub fn sample_rois(
    proposals: &[BBox],
    gts: &[GtBox],
    image: usize,
    background: usize,
    cfg: &SamplingConfig,
    box_scale: f64,
    rng: &mut impl Rng,
) -> Vec<RoiSample> {
    let cands: Vec<BBox> = proposals.iter().copied().chain(gts.iter().map(|g| g.bbox)).collect();
    let matches: Vec<Option<(usize, f64)>> = cands.iter().map(|b| best_match(b, gts)).collect();
    let is_pos = |i: usize| matches[i].is_some_and(|(_, v)| v >= cfg.roi_positive_iou);
    let pos: Vec<usize> = (0..cands.len()).filter(|&i| is_pos(i)).collect();
    let neg: Vec<usize> = (0..cands.len()).filter(|&i| !is_pos(i)).collect();
    let (pos, neg) = sample(pos, neg, cfg.roi_per_image, cfg.roi_positive_fraction, rng);
    let mut out = Vec::with_capacity(pos.len() + neg.len());
    for &i in &pos {
        let (j, v) = matches[i].unwrap_or((0, 0.0));
        let g = &gts[j];
        out.push(RoiSample {
            image,
            bbox: cands[i],
            label: g.class_id,
            gt_iou: v,
            reg_target: g.regress.then(|| encode_boundaries(&cands[i], &g.bbox, box_scale)),
        });
    }
    for &i in &neg {
        out.push(RoiSample {
            image,
            bbox: cands[i],
            label: background,
            gt_iou: matches[i].map_or(0.0, |m| m.1),
            reg_target: None,
        });
    }
    out
}
