//! COCO-style average precision and the uncertainty / localization
//! correlation statistic.
//!
//! AP uses 101-point interpolation: precision is made monotone by taking,
//! at every recall level r in {0, 0.01, ..., 1}, the best precision reached
//! at any recall >= r, and the 101 values are averaged. Detections are
//! matched greedily in descending score order (ties keep input order) to
//! the unmatched ground truth of the same class and image with the highest
//! IoU at or above the threshold; IoU ties go to the lower ground-truth
//! index. Classes without ground truth are left out of every mean.

use std::fmt::Write as _;

use crate::boxes::BBox;
use crate::detector::{sort_by_score, DetectionRecord};
use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const MIN_CORRELATION_SAMPLES: usize = 30;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Scored box of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image_id: u64,
    pub score: f64,
    pub bbox: BBox,
}

/// True-positive flags of `dets` in descending score order, plus that order.
fn greedy_match(dets: &[ScoredBox], gts: &[ScoredBox], iou_thresh: f64) -> (Vec<usize>, Vec<bool>) {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = sort_by_score(&scores);
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != d.image_id {
                continue;
            }
            let v = d.bbox.iou(&g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (order, tp)
}

/// 101-point interpolated AP of one class; `None` without ground truth.
/// Ground-truth scores are ignored.
pub fn average_precision(dets: &[ScoredBox], gts: &[ScoredBox], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let (_, tp) = greedy_match(dets, gts, iou_thresh);
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / gts.len() as f64);
    }
    // running max from the right makes precision monotone in recall
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    Some(sum / 101.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub num_classes: usize,
    /// `per_class[c][t]` for IoU threshold `IOU_THRESHOLDS[t]`; `None` for
    /// classes without ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

impl ApReport {
    /// Mean over classes with ground truth at threshold index `t`.
    pub fn at(&self, t: usize) -> f64 {
        let v: Vec<f64> = self.per_class.iter().filter_map(|c| c[t]).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for t in IOU_THRESHOLDS {
            let _ = write!(out, ",AP{:.0}", t * 100.0);
        }
        out.push('\n');
        for (c, row) in self.per_class.iter().enumerate() {
            let _ = write!(out, "{c}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "# AP50={} AP75={} AP50:95={}", self.ap50, self.ap75, self.ap50_95);
        out
    }
}

fn split_by_class(dets: &[DetectionRecord], gts: &[GroundTruth], class: usize) -> (Vec<ScoredBox>, Vec<ScoredBox>) {
    let d = dets
        .iter()
        .filter(|r| r.detection.class_id == class)
        .map(|r| ScoredBox { image_id: r.image_id, score: r.detection.score, bbox: r.detection.bbox })
        .collect();
    let g = gts
        .iter()
        .filter(|g| g.class_id == class)
        .map(|g| ScoredBox { image_id: g.image_id, score: 1.0, bbox: g.bbox })
        .collect();
    (d, g)
}

pub fn evaluate(dets: &[DetectionRecord], gts: &[GroundTruth], num_classes: usize) -> ApReport {
    let per_class: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| {
            let (d, g) = split_by_class(dets, gts, c);
            IOU_THRESHOLDS.iter().map(|&t| average_precision(&d, &g, t)).collect()
        })
        .collect();
    let mut r = ApReport { num_classes, per_class, ap50: 0.0, ap75: 0.0, ap50_95: 0.0 };
    r.ap50 = r.at(0);
    r.ap75 = r.at(5);
    r.ap50_95 = (0..IOU_THRESHOLDS.len()).map(|t| r.at(t)).sum::<f64>() / IOU_THRESHOLDS.len() as f64;
    r
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: a.len() });
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationBin {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub mean_sigma: f64,
    pub mean_iou: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub spearman_rho: f64,
    pub samples: usize,
    /// Deciles of mean uncertainty, lowest first.
    pub bins: Vec<CorrelationBin>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# spearman_rho={} samples={}\nsigma_lo,sigma_hi,mean_sigma,mean_iou,count\n", self.spearman_rho, self.samples);
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.sigma_lo, b.sigma_hi, b.mean_sigma, b.mean_iou, b.count);
        }
        out
    }
}

/// Pairs of (mean uncertainty, IoU with the best-overlapping ground truth of
/// the same image) for detections scoring at least `min_score` that overlap
/// some ground truth.
pub fn matched_pairs(dets: &[DetectionRecord], gts: &[GroundTruth], min_score: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in dets.iter().filter(|r| r.detection.score >= min_score) {
        let best = gts
            .iter()
            .filter(|g| g.image_id == r.image_id)
            .map(|g| g.bbox.iou(&r.detection.bbox))
            .fold(0.0, f64::max);
        if best > 0.0 {
            out.push((r.detection.sigma_mean, best));
        }
    }
    out
}

/// Spearman correlation between mean uncertainty and IoU, with decile bins.
pub fn uncertainty_iou_correlation(pairs: &[(f64, f64)]) -> Result<CorrelationReport> {
    if pairs.len() < MIN_CORRELATION_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_CORRELATION_SAMPLES, got: pairs.len() });
    }
    let sigma: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ious: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rho = spearman(&sigma, &ious)?;
    let order = sort_by_score(&sigma);
    let n = pairs.len();
    let mut bins = Vec::with_capacity(10);
    for d in 0..10 {
        // order is descending; walk it from the back for ascending sigma
        let idx: Vec<usize> = (d * n / 10..(d + 1) * n / 10).map(|k| order[n - 1 - k]).collect();
        if idx.is_empty() {
            continue;
        }
        let m = idx.len() as f64;
        bins.push(CorrelationBin {
            sigma_lo: sigma[idx[0]],
            sigma_hi: sigma[*idx.last().unwrap_or(&idx[0])],
            mean_sigma: idx.iter().map(|&i| sigma[i]).sum::<f64>() / m,
            mean_iou: idx.iter().map(|&i| ious[i]).sum::<f64>() / m,
            count: idx.len(),
        });
    }
    Ok(CorrelationReport { spearman_rho: rho, samples: n, bins })
}
