//! A small two-stage detector.
//!
//! ```text
//! image 64x64x3
//!   conv 3x3/2 3->16, relu        32x32x16
//!   conv 3x3/2 16->32, relu       16x16x32
//!   avg pool 2                     8x8x32      (stride 8 feature grid)
//! rpn
//!   conv 3x3 32->32, relu
//!   1x1 -> 6 objectness + 6x4 offsets per cell (3 sizes x 2 aspect ratios)
//! roi head (per box, nearest-cell 4x4 pooling)
//!   fc 512->128, relu              "hidden"
//!   cls    128 -> K+1              (background = K)
//!   reg    128 -> 4                class-agnostic boundary offsets
//!   unc    128 -> 4K               log-variance per class and boundary
//!   iou    128 -> K, sigmoid       optional localization-quality branch
//! projection (128 -> 256 BN relu -> 64 BN without affine)
//! prediction, student only (64 -> 256 BN relu -> 64)
//! ```
//!
//! Feature maps are stored as `[batch * h * w, channels]` row-major HWC.
//! Convolutions are an im2col gather followed by a matmul.

mod boxops;
mod dump;
mod loss;
mod targets;

pub use boxops::{jitter_box, jitter_with, nms, sort_by_score};
pub use dump::{detections_from_text, detections_to_text, read_detections, write_detections, DetectionRecord};
pub use loss::{roi_losses, rpn_losses, FocalParams, LossTerms, RoiRegLoss, FOCAL_ALPHA, FOCAL_GAMMA, SMOOTH_L1_BETA};
pub use targets::{assign_anchors, sample_rois, AnchorTargets, GtBox, RoiSample, SamplingConfig};

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{column_moments, NodeId, ParamKind, ParamStore, Tape, Tensor};
use crate::boxes::{decode_boundaries, sanitize, BBox};
use crate::error::{Error, Result};
use crate::losses::LOG_VAR_CLAMP;
use crate::scenes::Image;
use crate::seeds;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const POOL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub conv1_channels: usize,
    pub feature_channels: usize,
    pub grid: usize,
    pub hidden: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    /// Square-root areas of the anchors, in pixels.
    pub anchor_sizes: Vec<f64>,
    /// Height / width ratios of the anchors.
    pub anchor_ratios: Vec<f64>,
    pub box_scale: f64,
    pub predicted_iou: bool,
    pub pre_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    pub train_top_k: usize,
    pub eval_top_k: usize,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 5,
            image_size: 64,
            conv1_channels: 16,
            feature_channels: 32,
            grid: 16,
            hidden: 128,
            proj_hidden: 256,
            embed_dim: 64,
            anchor_sizes: vec![9.0, 14.0, 20.0],
            anchor_ratios: vec![0.75, 1.33],
            box_scale: 5.0,
            predicted_iou: false,
            pre_nms_top_n: 200,
            rpn_nms_iou: 0.7,
            train_top_k: 64,
            eval_top_k: 32,
            max_detections: 32,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> f64 {
        self.image_size as f64 / self.grid as f64
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub sigma: [f64; 4],
    pub sigma_mean: f64,
    pub iou_estimate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub anchor: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub node: NodeId,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[batch * anchors]`
    pub objectness: NodeId,
    /// `[batch * anchors, 4]`
    pub offsets: NodeId,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct RoiOutput {
    pub hidden: NodeId,
    pub cls_logits: NodeId,
    pub offsets: NodeId,
    /// Clamped log-variance, `[R, 4K]`.
    pub log_var: NodeId,
    /// Sigmoid IoU estimate per class, `[R, K]`, when the branch exists.
    pub iou: Option<NodeId>,
    /// Boxes smaller than one feature cell.
    pub degenerate: Vec<bool>,
}

/// Batch statistics seen by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub z: NodeId,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Which region of which image of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRef {
    pub image: usize,
    pub bbox: BBox,
}

struct PoolPlan {
    index: [Vec<Option<usize>>; 4],
    weight: [Vec<f64>; 4],
    degenerate: Vec<bool>,
}

type IndexCache = Mutex<HashMap<(u8, usize), Arc<Vec<Option<usize>>>>>;

#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    anchors: Vec<BBox>,
    conv_index: IndexCache,
}

impl Clone for Detector {
    fn clone(&self) -> Self {
        Detector::new(self.cfg.clone())
    }
}

const CONV1: u8 = 0;
const CONV2: u8 = 1;
const RPN_CONV: u8 = 2;

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Self {
        let anchors = make_anchors(&cfg);
        Detector { cfg, anchors, conv_index: Mutex::new(HashMap::new()) }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Anchors of one image, ordered by cell (row-major) then by size and
    /// aspect ratio.
    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    fn rpn_outputs_per_cell(&self) -> usize {
        self.cfg.anchors_per_cell() * 5
    }

    /// Fresh parameters. `with_prediction` adds the student-only prediction
    /// module.
    pub fn init_params(&self, seed: u64, with_prediction: bool) -> Result<ParamStore> {
        let c = &self.cfg;
        let k = c.num_classes;
        let f = c.feature_channels;
        let mut rng = seeds::rng_for(seed, &[seeds::INIT]);
        let mut s = ParamStore::new();
        let he = |s: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            add_normal(s, name, fan_in, fan_out, std, rng)
        };
        he(&mut s, "backbone.conv1.w", 9 * 3, c.conv1_channels, &mut rng)?;
        s.add("backbone.conv1.b", Tensor::zeros(&[c.conv1_channels]), ParamKind::Trainable)?;
        he(&mut s, "backbone.conv2.w", 9 * c.conv1_channels, f, &mut rng)?;
        s.add("backbone.conv2.b", Tensor::zeros(&[f]), ParamKind::Trainable)?;
        he(&mut s, "rpn.conv.w", 9 * f, f, &mut rng)?;
        s.add("rpn.conv.b", Tensor::zeros(&[f]), ParamKind::Trainable)?;
        add_normal(&mut s, "rpn.head.w", f, self.rpn_outputs_per_cell(), 0.01, &mut rng)?;
        s.add("rpn.head.b", Tensor::zeros(&[self.rpn_outputs_per_cell()]), ParamKind::Trainable)?;
        he(&mut s, "roi.fc.w", POOL * POOL * f, c.hidden, &mut rng)?;
        s.add("roi.fc.b", Tensor::zeros(&[c.hidden]), ParamKind::Trainable)?;
        add_normal(&mut s, "roi.cls.w", c.hidden, k + 1, 0.01, &mut rng)?;
        s.add("roi.cls.b", Tensor::zeros(&[k + 1]), ParamKind::Trainable)?;
        add_normal(&mut s, "roi.reg.w", c.hidden, 4, 0.001, &mut rng)?;
        s.add("roi.reg.b", Tensor::zeros(&[4]), ParamKind::Trainable)?;
        add_normal(&mut s, "roi.unc.w", c.hidden, 4 * k, 0.001, &mut rng)?;
        s.add("roi.unc.b", Tensor::zeros(&[4 * k]), ParamKind::Trainable)?;
        if c.predicted_iou {
            add_normal(&mut s, "roi.iou.w", c.hidden, k, 0.01, &mut rng)?;
            s.add("roi.iou.b", Tensor::zeros(&[k]), ParamKind::Trainable)?;
        }
        he(&mut s, "proj.fc1.w", c.hidden, c.proj_hidden, &mut rng)?;
        add_bn(&mut s, "proj.bn1", c.proj_hidden, true)?;
        he(&mut s, "proj.fc2.w", c.proj_hidden, c.embed_dim, &mut rng)?;
        add_bn(&mut s, "proj.bn2", c.embed_dim, false)?;
        if with_prediction {
            he(&mut s, "pred.fc1.w", c.embed_dim, c.proj_hidden, &mut rng)?;
            add_bn(&mut s, "pred.bn1", c.proj_hidden, true)?;
            he(&mut s, "pred.fc2.w", c.proj_hidden, c.embed_dim, &mut rng)?;
        }
        Ok(s)
    }

    fn cached_index(&self, layer: u8, batch: usize, build: impl FnOnce() -> Vec<Option<usize>>) -> Arc<Vec<Option<usize>>> {
        let mut cache = self.conv_index.lock().unwrap_or_else(|e| e.into_inner());
        cache.entry((layer, batch)).or_insert_with(|| Arc::new(build())).clone()
    }

    fn conv(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        layer: (u8, &str),
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let index = self.cached_index(layer.0, geom.batch, || im2col_index(geom));
        let (ho, wo) = geom.out_hw();
        let cols = tape.gather(x, index, &[geom.batch * ho * wo, 9 * geom.c])?;
        let w = tape.param(store, &format!("{}.w", layer.1))?;
        let b = tape.param(store, &format!("{}.b", layer.1))?;
        let y = tape.matmul(cols, w)?;
        let y = tape.add_row(y, b)?;
        tape.relu(y)
    }

    /// Backbone over a batch of images; returns the `[batch * grid^2, F]` map.
    pub fn backbone(&self, tape: &mut Tape, store: &ParamStore, images: &[&Image]) -> Result<Features> {
        let c = &self.cfg;
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = c.image_size;
        let mut data = Vec::with_capacity(images.len() * n * n * 3);
        for img in images {
            if img.height != n || img.width != n || img.channels != 3 {
                return Err(Error::shape(
                    "backbone",
                    format!("image {}x{}x{}, expected {n}x{n}x3", img.height, img.width, img.channels),
                ));
            }
            data.extend(img.data.iter().map(|v| v - 0.5));
        }
        let batch = images.len();
        let x = tape.constant(Tensor::new(vec![batch * n * n, 3], data)?);
        let g1 = ConvGeom { batch, h: n, w: n, c: 3, stride: 2 };
        let x = self.conv(tape, store, x, (CONV1, "backbone.conv1"), g1)?;
        let (h1, w1) = g1.out_hw();
        let g2 = ConvGeom { batch, h: h1, w: w1, c: c.conv1_channels, stride: 2 };
        let x = self.conv(tape, store, x, (CONV2, "backbone.conv2"), g2)?;
        let (h2, w2) = g2.out_hw();
        let k = h2 / c.grid;
        let x = if k > 1 {
            // images stack along rows; windows never straddle two images
            // because each image height is a multiple of k
            tape.avg_pool(x, batch * h2, w2, k)?
        } else {
            x
        };
        Ok(Features { node: x, batch })
    }

    pub fn forward_rpn(&self, tape: &mut Tape, store: &ParamStore, feats: &Features) -> Result<RpnOutput> {
        let c = &self.cfg;
        let g = ConvGeom { batch: feats.batch, h: c.grid, w: c.grid, c: c.feature_channels, stride: 1 };
        let h = self.conv(tape, store, feats.node, (RPN_CONV, "rpn.conv"), g)?;
        let w = tape.param(store, "rpn.head.w")?;
        let b = tape.param(store, "rpn.head.b")?;
        let out = tape.matmul(h, w)?;
        let out = tape.add_row(out, b)?;
        let a = c.anchors_per_cell();
        let total = feats.batch * c.grid * c.grid * a;
        let obj = tape.slice(out, 1, 0, a)?;
        let obj = tape.reshape(obj, &[total])?;
        let off = tape.slice(out, 1, a, 5 * a)?;
        let off = tape.reshape(off, &[total, 4])?;
        Ok(RpnOutput { objectness: obj, offsets: off, batch: feats.batch })
    }

    /// Decoded, NMS-deduplicated proposals of one image of the batch, sorted
    /// by objectness (ties by anchor index) and capped at `top_k`.
    pub fn propose(&self, tape: &Tape, rpn: &RpnOutput, image: usize, top_k: usize, nms_iou: f64) -> Vec<Proposal> {
        let na = self.anchors.len();
        let obj = &tape.value(rpn.objectness).data()[image * na..(image + 1) * na];
        let off = &tape.value(rpn.offsets).data()[image * na * 4..(image + 1) * na * 4];
        self.propose_from(obj, off, top_k, nms_iou)
    }

    /// [`Detector::propose`] over raw per-anchor values of one image.
    pub fn propose_from(&self, objectness: &[f64], offsets: &[f64], top_k: usize, nms_iou: f64) -> Vec<Proposal> {
        let s = self.cfg.image_size as f64;
        let mut order = sort_by_score(objectness);
        order.truncate(self.cfg.pre_nms_top_n.max(top_k));
        let boxes: Vec<BBox> = order
            .iter()
            .map(|&a| {
                let d = decode_boundaries(&self.anchors[a], &offsets[a * 4..a * 4 + 4], self.cfg.box_scale);
                sanitize(finite_or(d, self.anchors[a]), s, s, 1.0)
            })
            .collect();
        let scores: Vec<f64> = order.iter().map(|&a| objectness[a]).collect();
        let mut keep = nms(&boxes, &scores, nms_iou);
        keep.truncate(top_k);
        keep.into_iter()
            .map(|i| Proposal { bbox: boxes[i], objectness: scores[i], anchor: order[i] })
            .collect()
    }

    /// Index for nearest-cell 4x4 pooling of `rois` from a feature batch.
    /// Bilinear sampling of a `POOL x POOL` grid of bin centers per ROI:
    /// four corner gathers and their interpolation weights.
    fn pool_index(&self, rois: &[RoiRef], batch: usize) -> Result<PoolPlan> {
        let c = &self.cfg;
        let (g, f) = (c.grid, c.feature_channels);
        let stride = c.stride();
        let n = rois.len() * POOL * POOL * f;
        let mut index: [Vec<Option<usize>>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        let mut weight: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        let mut degenerate = Vec::with_capacity(rois.len());
        // feature cell i is centered at (i + 0.5) * stride
        let axis = |v: f64| {
            let u = (v / stride - 0.5).clamp(0.0, (g - 1) as f64);
            let i0 = (u.floor() as usize).min(g - 1);
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, u - i0 as f64)
        };
        for r in rois {
            if r.image >= batch {
                return Err(Error::invalid(format!("roi on image {} of a batch of {batch}", r.image)));
            }
            if !r.bbox.is_valid() {
                return Err(Error::invalid(format!("invalid roi {:?}", r.bbox)));
            }
            degenerate.push(r.bbox.area() < stride * stride);
            for py in 0..POOL {
                let (y0, y1, wy) = axis(r.bbox.y1 + (py as f64 + 0.5) * r.bbox.height() / POOL as f64);
                for px in 0..POOL {
                    let (x0, x1, wx) = axis(r.bbox.x1 + (px as f64 + 0.5) * r.bbox.width() / POOL as f64);
                    let corners = [
                        (y0, x0, (1.0 - wy) * (1.0 - wx)),
                        (y0, x1, (1.0 - wy) * wx),
                        (y1, x0, wy * (1.0 - wx)),
                        (y1, x1, wy * wx),
                    ];
                    for (k, (y, x, w)) in corners.into_iter().enumerate() {
                        let base = (r.image * g * g + y * g + x) * f;
                        index[k].extend((0..f).map(|ch| Some(base + ch)));
                        weight[k].extend(std::iter::repeat_n(w, f));
                    }
                }
            }
        }
        Ok(PoolPlan { index, weight, degenerate })
    }

    /// Shared ROI trunk: pooled features through the hidden layer.
    pub fn roi_hidden(&self, tape: &mut Tape, store: &ParamStore, feats: &Features, rois: &[RoiRef]) -> Result<(NodeId, Vec<bool>)> {
        if rois.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let shape = [rois.len(), POOL * POOL * self.cfg.feature_channels];
        let plan = self.pool_index(rois, feats.batch)?;
        let mut pooled: Option<NodeId> = None;
        for (index, weight) in plan.index.into_iter().zip(plan.weight) {
            let corner = tape.gather(feats.node, Arc::new(index), &shape)?;
            let w = tape.constant(Tensor::new(shape.to_vec(), weight)?);
            let term = tape.mul(corner, w)?;
            pooled = Some(match pooled {
                Some(p) => tape.add(p, term)?,
                None => term,
            });
        }
        let pooled = pooled.ok_or(Error::EmptyBatch)?;
        let w = tape.param(store, "roi.fc.w")?;
        let b = tape.param(store, "roi.fc.b")?;
        let h = tape.matmul(pooled, w)?;
        let h = tape.add_row(h, b)?;
        Ok((tape.relu(h)?, plan.degenerate))
    }

    fn linear(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = tape.param(store, &format!("{prefix}.w"))?;
        let y = tape.matmul(x, w)?;
        match store.contains(&format!("{prefix}.b")) {
            true => {
                let b = tape.param(store, &format!("{prefix}.b"))?;
                tape.add_row(y, b)
            }
            false => Ok(y),
        }
    }

    pub fn roi_forward(&self, tape: &mut Tape, store: &ParamStore, feats: &Features, rois: &[RoiRef]) -> Result<RoiOutput> {
        let (hidden, degenerate) = self.roi_hidden(tape, store, feats, rois)?;
        let cls_logits = self.linear(tape, store, hidden, "roi.cls")?;
        let offsets = self.linear(tape, store, hidden, "roi.reg")?;
        let raw = self.linear(tape, store, hidden, "roi.unc")?;
        let log_var = tape.clamp(raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)?;
        let iou = if store.contains("roi.iou.w") {
            let l = self.linear(tape, store, hidden, "roi.iou")?;
            Some(tape.sigmoid(l)?)
        } else {
            None
        };
        Ok(RoiOutput { hidden, cls_logits, offsets, log_var, iou, degenerate })
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        prefix: &str,
        train: bool,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<NodeId> {
        let y = if train {
            let v = tape.value(x);
            let (rows, cols) = v.dims2().ok_or_else(|| Error::shape("batch_norm", format!("{:?}", v.shape())))?;
            let (mean, var) = column_moments(v.data(), rows, cols);
            stats.push(BnBatchStats { prefix: prefix.to_string(), mean, var });
            tape.batch_norm(x, BN_EPS)?
        } else {
            let mean = store.get(&format!("{prefix}.running_mean"))?.value.data();
            let var = store.get(&format!("{prefix}.running_var"))?.value.data();
            let shift = tape.constant(Tensor::vector(mean.iter().map(|m| -m).collect()));
            let scale = tape.constant(Tensor::vector(var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()));
            let centered = tape.add_row(x, shift)?;
            tape.mul_row(centered, scale)?
        };
        if store.contains(&format!("{prefix}.gamma")) {
            let g = tape.param(store, &format!("{prefix}.gamma"))?;
            let b = tape.param(store, &format!("{prefix}.beta"))?;
            let y = tape.mul_row(y, g)?;
            tape.add_row(y, b)
        } else {
            Ok(y)
        }
    }

    /// Projection (and, for the student, prediction) of ROI hidden features
    /// to unit-norm embeddings. The teacher uses running batch-norm
    /// statistics and its output is detached; the student uses batch
    /// statistics, which are returned for the running-average update.
    pub fn embed_hidden(&self, tape: &mut Tape, store: &ParamStore, hidden: NodeId, role: Role) -> Result<Embedding> {
        let train = role == Role::Student;
        let mut stats = Vec::new();
        let h = self.linear(tape, store, hidden, "proj.fc1")?;
        let h = self.batch_norm(tape, store, h, "proj.bn1", train, &mut stats)?;
        let h = tape.relu(h)?;
        let h = self.linear(tape, store, h, "proj.fc2")?;
        let mut z = self.batch_norm(tape, store, h, "proj.bn2", train, &mut stats)?;
        if role == Role::Student {
            let p = self.linear(tape, store, z, "pred.fc1")?;
            let p = self.batch_norm(tape, store, p, "pred.bn1", true, &mut stats)?;
            let p = tape.relu(p)?;
            z = self.linear(tape, store, p, "pred.fc2")?;
        }
        let mut z = tape.l2_normalize(z)?;
        if role == Role::Teacher {
            z = tape.detach(z)?;
        }
        Ok(Embedding { z, bn_stats: stats })
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, feats: &Features, rois: &[RoiRef], role: Role) -> Result<Embedding> {
        let (hidden, _) = self.roi_hidden(tape, store, feats, rois)?;
        self.embed_hidden(tape, store, hidden, role)
    }

    /// Per-class detections from ROI outputs over `proposals` (one slice per
    /// image, laid out consecutively in the ROI batch).
    pub fn decode_and_nms(
        &self,
        tape: &Tape,
        roi: &RoiOutput,
        proposals: &[Vec<Proposal>],
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let k = self.cfg.num_classes;
        let probs = softmax_rows(tape.value(roi.cls_logits).data(), k + 1);
        let offsets = tape.value(roi.offsets).data();
        let log_var = tape.value(roi.log_var).data();
        let iou = roi.iou.map(|n| tape.value(n).data());
        let total: usize = proposals.iter().map(Vec::len).sum();
        if probs.len() != total * (k + 1) {
            return Err(Error::shape("decode_and_nms", format!("{} ROI rows for {total} proposals", probs.len() / (k + 1))));
        }
        let s = self.cfg.image_size as f64;
        let mut out = Vec::with_capacity(proposals.len());
        let mut row = 0;
        for props in proposals {
            let mut cands: Vec<Detection> = Vec::new();
            for p in props {
                let bbox = sanitize(
                    finite_or(decode_boundaries(&p.bbox, &offsets[row * 4..row * 4 + 4], self.cfg.box_scale), p.bbox),
                    s,
                    s,
                    1.0,
                );
                for c in 0..k {
                    let score = probs[row * (k + 1) + c];
                    if score <= score_thresh {
                        continue;
                    }
                    let sigma: [f64; 4] = std::array::from_fn(|j| (0.5 * log_var[row * 4 * k + 4 * c + j]).exp());
                    cands.push(Detection {
                        class_id: c,
                        score,
                        bbox,
                        sigma,
                        sigma_mean: sigma.iter().sum::<f64>() / 4.0,
                        iou_estimate: iou.map(|v| v[row * k + c]),
                    });
                }
                row += 1;
            }
            out.push(class_nms(cands, nms_iou, self.cfg.max_detections));
        }
        Ok(out)
    }

    /// Inference on a batch: backbone, proposals, ROI head, per-class NMS.
    pub fn detect(&self, store: &ParamStore, images: &[&Image], score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        let mut tape = Tape::new();
        let feats = self.backbone(&mut tape, store, images)?;
        let rpn = self.forward_rpn(&mut tape, store, &feats)?;
        let proposals: Vec<Vec<Proposal>> = (0..images.len())
            .map(|i| self.propose(&tape, &rpn, i, self.cfg.eval_top_k, self.cfg.rpn_nms_iou))
            .collect();
        let rois: Vec<RoiRef> = proposals
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |p| RoiRef { image: i, bbox: p.bbox }))
            .collect();
        if rois.is_empty() {
            return Ok(vec![Vec::new(); images.len()]);
        }
        let roi = self.roi_forward(&mut tape, store, &feats, &rois)?;
        self.decode_and_nms(&tape, &roi, &proposals, score_thresh, nms_iou)
    }
}

/// Per-class NMS, then the best `max_det` by score.
pub fn class_nms(cands: Vec<Detection>, nms_iou: f64, max_det: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let mut classes: Vec<usize> = cands.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let group: Vec<&Detection> = cands.iter().filter(|d| d.class_id == c).collect();
        let boxes: Vec<BBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        kept.extend(nms(&boxes, &scores, nms_iou).into_iter().map(|i| *group[i]));
    }
    let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
    let mut order = sort_by_score(&scores);
    order.truncate(max_det);
    order.into_iter().map(|i| kept[i]).collect()
}

pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn finite_or(b: BBox, fallback: BBox) -> BBox {
    if b.coords().iter().all(|v| v.is_finite()) {
        b
    } else {
        fallback
    }
}

fn make_anchors(cfg: &DetectorConfig) -> Vec<BBox> {
    let stride = cfg.stride();
    let mut out = Vec::with_capacity(cfg.grid * cfg.grid * cfg.anchors_per_cell());
    for cy in 0..cfg.grid {
        for cx in 0..cfg.grid {
            let (x, y) = ((cx as f64 + 0.5) * stride, (cy as f64 + 0.5) * stride);
            for &s in &cfg.anchor_sizes {
                for &r in &cfg.anchor_ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox::from_center(x, y, w, h));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    stride: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride), self.w.div_ceil(self.stride))
    }
}

/// 3x3, padding 1. Output row `(b, oy, ox)`, column `(ky * 3 + kx) * c + ch`.
fn im2col_index(g: ConvGeom) -> Vec<Option<usize>> {
    let (ho, wo) = g.out_hw();
    let mut idx = Vec::with_capacity(g.batch * ho * wo * 9 * g.c);
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * g.stride + ky) as isize - 1;
                        let x = (ox * g.stride + kx) as isize - 1;
                        let inside = y >= 0 && x >= 0 && (y as usize) < g.h && (x as usize) < g.w;
                        for ch in 0..g.c {
                            idx.push(inside.then(|| ((b * g.h + y as usize) * g.w + x as usize) * g.c + ch));
                        }
                    }
                }
            }
        }
    }
    idx
}

fn add_normal(s: &mut ParamStore, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Result<usize> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    s.add(name, Tensor::matrix(rows, cols, data)?, ParamKind::Trainable)
}

fn add_bn(s: &mut ParamStore, prefix: &str, dim: usize, affine: bool) -> Result<()> {
    if affine {
        s.add(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0), ParamKind::Trainable)?;
        s.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), ParamKind::Trainable)?;
    }
    s.add(format!("{prefix}.running_mean"), Tensor::zeros(&[dim]), ParamKind::Buffer)?;
    s.add(format!("{prefix}.running_var"), Tensor::full(&[dim], 1.0), ParamKind::Buffer)?;
    Ok(())
}

/// Running-average update of batch-norm buffers from recorded batch stats.
pub fn update_running_stats(store: &mut ParamStore, stats: &[BnBatchStats], momentum: f64) -> Result<()> {
    for s in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let p = store.get_mut(&format!("{}.{suffix}", s.prefix))?;
            for (r, b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}

/// Whether a parameter belongs to the student-only prediction module.
pub fn is_prediction_param(name: &str) -> bool {
    name.starts_with("pred.")
}

/// Teacher copy of a student store: everything except the prediction module,
/// frozen.
pub fn teacher_from_student(student: &ParamStore) -> Result<ParamStore> {
    let mut t = ParamStore::new();
    for p in student.iter().filter(|p| !is_prediction_param(&p.name)) {
        t.add(p.name.clone(), p.value.clone(), p.kind)?;
    }
    t.set_frozen(true);
    Ok(t)
}
