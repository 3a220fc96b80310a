//! Teacher-student training: a supervised pre-training stage, then mutual
//! learning where an EMA teacher labels weakly augmented unlabeled images
//! for a student trained on strong augmentations.
//!
//! Pseudo-labels are filtered in two steps. Class labels need a score above
//! `t_cls`; box labels additionally need good localization quality, by
//! default a mean predicted uncertainty below `t_reg`. The object-wise
//! contrastive term pulls student embeddings of teacher-detected objects in
//! one strong view toward teacher embeddings of the same (and same-class,
//! confident) objects in the other strong view.

use rand::Rng;

use crate::autodiff::{NodeId, ParamKind, ParamStore, Tape, Tensor};
use crate::boxes::{decode_boundaries, BBox};
use crate::detector::{
    assign_anchors, jitter_box, roi_losses, rpn_losses, sample_rois, teacher_from_student, update_running_stats,
    AnchorTargets, BnBatchStats, Detection, Detector, Features, FocalParams, GtBox, Role, RoiRef, RoiRegLoss, RpnOutput,
    SamplingConfig, BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::losses::{ocl_loss, pairing_weights, supervised_loss, total_loss, RoiEmbeddingBatch};
use crate::scenes::{apply_augmentation, AugKind, AugmentationSpec, AugmentedView, Image, Scene};
use crate::seeds;

const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterThresholds {
    pub t_cls: f64,
    pub t_cont: f64,
    pub t_reg: f64,
    pub tau: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds { t_cls: 0.7, t_cont: 0.7, t_reg: 0.5, tau: 0.07 }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("thresholds.t_cls", self.t_cls), ("thresholds.t_cont", self.t_cont), ("thresholds.t_reg", self.t_reg)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config { key: key.into(), msg: format!("must be in (0, 1], got {v}") });
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config { key: "thresholds.tau".into(), msg: format!("must be > 0, got {}", self.tau) });
        }
        Ok(())
    }
}

/// How box pseudo-labels are selected among class pseudo-labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocQuality {
    /// Mean predicted boundary uncertainty below `t_reg`.
    Uncertainty,
    /// Variance of refinements of jittered copies below a threshold.
    BoxJitter,
    /// Output of an IoU branch above a threshold.
    PredictedIou,
}

impl LocQuality {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocQuality::Uncertainty => "uncertainty",
            LocQuality::BoxJitter => "box_jitter",
            LocQuality::PredictedIou => "predicted_iou",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uncertainty" => Some(LocQuality::Uncertainty),
            "box_jitter" => Some(LocQuality::BoxJitter),
            "predicted_iou" => Some(LocQuality::PredictedIou),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub thresholds: FilterThresholds,
    pub lambda_unsup: f64,
    pub lambda_ocl: f64,
    pub lambda_unc: f64,
    pub ocl: bool,
    pub rupl: bool,
    pub loc_quality: LocQuality,
    pub ema_momentum: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Score floor and NMS IoU of teacher predictions on unlabeled images.
    pub teacher_score_thresh: f64,
    pub teacher_nms_iou: f64,
    /// Teacher detections per image used as contrastive objects.
    pub ocl_objects_per_image: usize,
    /// Boundary jitter, as a fraction of box width or height.
    pub jitter: f64,
    pub box_jitter_thresh: f64,
    pub box_jitter_samples: usize,
    pub predicted_iou_thresh: f64,
    pub sampling: SamplingConfig,
    pub focal: FocalParams,
    /// Base seed of augmentation, sampling and jitter streams.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            thresholds: FilterThresholds::default(),
            lambda_unsup: 4.0,
            lambda_ocl: 0.1,
            lambda_unc: 0.25,
            ocl: true,
            rupl: true,
            loc_quality: LocQuality::Uncertainty,
            ema_momentum: 0.9996,
            lr: 0.01,
            momentum: 0.9,
            teacher_score_thresh: 0.05,
            teacher_nms_iou: 0.5,
            ocl_objects_per_image: 8,
            jitter: 0.06,
            box_jitter_thresh: 0.01,
            box_jitter_samples: 10,
            predicted_iou_thresh: 0.8,
            sampling: SamplingConfig::default(),
            focal: FocalParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Mutual,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Mutual => "mutual",
        }
    }
}

#[derive(Debug)]
pub struct TeacherStudentState {
    pub student: ParamStore,
    /// Present from the start of the mutual stage.
    pub teacher: Option<ParamStore>,
    /// SGD momentum buffers of the student, by parameter index.
    pub velocity: Vec<Vec<f64>>,
    pub ema_momentum: f64,
    pub stage: Stage,
    pub iteration: u64,
}

impl TeacherStudentState {
    pub fn new(student: ParamStore, ema_momentum: f64) -> Self {
        let velocity = student.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        TeacherStudentState { student, teacher: None, velocity, ema_momentum, stage: Stage::Pretrain, iteration: 0 }
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Stage { expected: stage.as_str(), actual: self.stage.as_str() });
        }
        Ok(())
    }

    /// Enters the mutual stage with the teacher initialized from the student.
    pub fn begin_mutual(&mut self) -> Result<()> {
        self.expect(Stage::Pretrain)?;
        self.teacher = Some(teacher_from_student(&self.student)?);
        self.stage = Stage::Mutual;
        Ok(())
    }

    pub fn teacher(&self) -> Result<&ParamStore> {
        self.teacher.as_ref().ok_or(Error::Stage { expected: "mutual", actual: self.stage.as_str() })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        let m = self.ema_momentum;
        let teacher = self.teacher.as_mut().ok_or(Error::Stage { expected: "mutual", actual: "pretrain" })?;
        ema_update(teacher, &self.student, m)
    }
}

/// One SGD step with momentum: `v = mu v + g`, `theta -= lr v`, on
/// trainable parameters only.
pub fn sgd_step(store: &mut ParamStore, velocity: &mut [Vec<f64>], lr: f64, momentum: f64) -> Result<()> {
    if velocity.len() != store.len() {
        return Err(Error::invalid(format!("{} momentum buffers for {} parameters", velocity.len(), store.len())));
    }
    for (p, v) in store.iter_mut().zip(velocity.iter_mut()) {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let g = p.grad.data().to_vec();
        for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

/// `teacher = m teacher + (1 - m) student` over every teacher parameter and
/// buffer. The student may additionally hold prediction-module parameters.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum must be in [0, 1], got {m}")));
    }
    let shared = student.names().filter(|n| !crate::detector::is_prediction_param(n)).count();
    if shared != teacher.len() {
        return Err(Error::NameMismatch(format!("teacher has {} parameters, student shares {shared}", teacher.len())));
    }
    for t in teacher.iter_mut() {
        let s = student.get(&t.name).map_err(|_| Error::NameMismatch(format!("`{}` missing from student", t.name)))?;
        if s.value.shape() != t.value.shape() {
            return Err(Error::shape("ema_update", format!("`{}`: {:?} vs {:?}", t.name, t.value.shape(), s.value.shape())));
        }
        for (a, b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Per-image pseudo-labels. `reg_set[i]` is a subset of `cls_set[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub cls_set: Vec<Vec<Detection>>,
    pub reg_set: Vec<Vec<Detection>>,
}

impl PseudoLabelSet {
    pub fn cls_count(&self) -> usize {
        self.cls_set.iter().map(Vec::len).sum()
    }

    pub fn reg_count(&self) -> usize {
        self.reg_set.iter().map(Vec::len).sum()
    }

    /// Whether every box label is also a class label of the same image.
    pub fn is_nested(&self) -> bool {
        self.cls_set.len() == self.reg_set.len()
            && self.reg_set.iter().zip(&self.cls_set).all(|(r, c)| r.iter().all(|d| c.contains(d)))
    }

    /// Mean of the mean uncertainty over class labels; NaN when empty.
    pub fn mean_sigma(&self) -> f64 {
        let n = self.cls_count();
        if n == 0 {
            return f64::NAN;
        }
        self.cls_set.iter().flatten().map(|d| d.sigma_mean).sum::<f64>() / n as f64
    }
}

/// Class labels are detections scoring strictly above `t_cls`; box labels
/// are the class labels accepted by `keep_reg(image, index, detection)`.
pub fn filter_pseudo_labels(
    detections: &[Vec<Detection>],
    t_cls: f64,
    mut keep_reg: impl FnMut(usize, usize, &Detection) -> bool,
) -> PseudoLabelSet {
    let mut out = PseudoLabelSet::default();
    for (i, dets) in detections.iter().enumerate() {
        let cls: Vec<Detection> = dets.iter().filter(|d| d.score > t_cls).copied().collect();
        let reg = cls.iter().enumerate().filter(|(j, d)| keep_reg(i, *j, d)).map(|(_, d)| *d).collect();
        out.cls_set.push(cls);
        out.reg_set.push(reg);
    }
    out
}

/// Variance of refined boundaries across jittered inputs, each boundary
/// normalized by the width (x) or height (y) of `reference`, averaged over
/// the four boundaries.
pub fn jitter_variance(refined: &[[f64; 4]], reference: &BBox) -> f64 {
    if refined.is_empty() {
        return 0.0;
    }
    let n = refined.len() as f64;
    let size = [reference.width(), reference.height(), reference.width(), reference.height()];
    let mut total = 0.0;
    for j in 0..4 {
        // deviations from the first sample keep identical inputs exactly 0
        let xs: Vec<f64> = refined.iter().map(|r| (r[j] - refined[0][j]) / size[j].max(1e-9)).collect();
        let mean = xs.iter().sum::<f64>() / n;
        total += xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    }
    total / 4.0
}

/// Box-jitter consistency of every detection: `num_samples` jittered copies
/// go through the ROI head and the spread of their refinements is measured.
pub fn box_jitter_scores(
    det: &Detector,
    teacher: &ParamStore,
    images: &[&Image],
    detections: &[Vec<Detection>],
    num_samples: usize,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if num_samples < 2 {
        return Err(Error::invalid(format!("box jitter needs at least 2 samples, got {num_samples}")));
    }
    let s = det.config().image_size as f64;
    let mut rois = Vec::new();
    for (i, dets) in detections.iter().enumerate() {
        for d in dets {
            for _ in 0..num_samples {
                rois.push(RoiRef { image: i, bbox: jitter_box(&d.bbox, (-jitter, jitter), s, rng) });
            }
        }
    }
    let mut out: Vec<Vec<f64>> = detections.iter().map(|d| Vec::with_capacity(d.len())).collect();
    if rois.is_empty() {
        return Ok(out);
    }
    let mut tape = Tape::new();
    let feats = det.backbone(&mut tape, teacher, images)?;
    let roi = det.roi_forward(&mut tape, teacher, &feats, &rois)?;
    let offsets = tape.value(roi.offsets).data();
    let mut r = 0;
    for (i, dets) in detections.iter().enumerate() {
        for d in dets {
            let refined: Vec<[f64; 4]> = (r..r + num_samples)
                .map(|k| decode_boundaries(&rois[k].bbox, &offsets[4 * k..4 * k + 4], det.config().box_scale).coords())
                .collect();
            out[i].push(jitter_variance(&refined, &d.bbox));
            r += num_samples;
        }
    }
    Ok(out)
}

/// Box-jitter consistency of a single detection.
pub fn box_jitter_consistency(
    det: &Detector,
    teacher: &ParamStore,
    image: &Image,
    detection: &Detection,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeds::rng_for(seed, &[seeds::JITTER]);
    let scores = box_jitter_scores(det, teacher, &[image], &[vec![*detection]], num_samples, 0.06, &mut rng)?;
    Ok(scores[0][0])
}

/// Teacher predictions on `images` and their filtered pseudo-labels.
pub fn generate_pseudo_labels(
    det: &Detector,
    teacher: &ParamStore,
    images: &[&Image],
    cfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<Detection>>, PseudoLabelSet)> {
    let dets = det.detect(teacher, images, cfg.teacher_score_thresh, cfg.teacher_nms_iou)?;
    let t = &cfg.thresholds;
    let set = if !cfg.rupl {
        filter_pseudo_labels(&dets, t.t_cls, |_, _, _| true)
    } else {
        match cfg.loc_quality {
            LocQuality::Uncertainty => filter_pseudo_labels(&dets, t.t_cls, |_, _, d| d.sigma_mean < t.t_reg),
            LocQuality::PredictedIou => filter_pseudo_labels(&dets, t.t_cls, |_, _, d| {
                d.iou_estimate.is_some_and(|v| v > cfg.predicted_iou_thresh)
            }),
            LocQuality::BoxJitter => {
                let cls = filter_pseudo_labels(&dets, t.t_cls, |_, _, _| false).cls_set;
                let scores = box_jitter_scores(det, teacher, images, &cls, cfg.box_jitter_samples, cfg.jitter, rng)?;
                filter_pseudo_labels(&dets, t.t_cls, |i, j, _| scores[i][j] < cfg.box_jitter_thresh)
            }
        }
    };
    Ok((dets, set))
}

/// Scalar values of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub stage: Stage,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_ocl: f64,
    pub l_total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub iou_loss: Option<f64>,
    pub n_cls_labels: usize,
    pub n_reg_labels: usize,
    pub mean_sigma: f64,
    pub reg_subset_of_cls: bool,
    pub ocl_objects: usize,
    pub ocl_degenerate: bool,
}

struct DetLosses {
    rpn_cls: NodeId,
    rpn_reg: NodeId,
    roi_cls: NodeId,
    roi_reg: NodeId,
    iou: Option<NodeId>,
}

impl DetLosses {
    fn sum(&self, tape: &mut Tape) -> Result<NodeId> {
        supervised_loss(tape, self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg)
    }
}

/// Detection losses on the images `offset..offset + gts.len()` of a batch.
#[allow(clippy::too_many_arguments)]
fn detection_losses(
    det: &Detector,
    tape: &mut Tape,
    store: &ParamStore,
    feats: &Features,
    rpn: &RpnOutput,
    offset: usize,
    gts: &[Vec<GtBox>],
    sampling: &SamplingConfig,
    focal: FocalParams,
    reg_loss: RoiRegLoss,
    rng: &mut impl Rng,
) -> Result<DetLosses> {
    let c = det.config();
    let mut targets = AnchorTargets::default();
    let mut samples = Vec::new();
    for (k, g) in gts.iter().enumerate() {
        let i = offset + k;
        targets.extend(assign_anchors(det.anchors(), g, i, sampling, c.box_scale, rng));
        let props: Vec<BBox> = det.propose(tape, rpn, i, c.train_top_k, c.rpn_nms_iou).iter().map(|p| p.bbox).collect();
        samples.extend(sample_rois(&props, g, i, c.background(), sampling, c.box_scale, rng));
    }
    let rpn_terms = rpn_losses(tape, rpn, &targets)?;
    let (roi_cls, roi_reg, iou) = if samples.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z, c.predicted_iou.then_some(z))
    } else {
        let rois: Vec<RoiRef> = samples.iter().map(|s| RoiRef { image: s.image, bbox: s.bbox }).collect();
        let roi = det.roi_forward(tape, store, feats, &rois)?;
        let (t, iou) = roi_losses(tape, &roi, &samples, c.num_classes, focal, reg_loss)?;
        (t.cls, t.reg, iou)
    };
    Ok(DetLosses { rpn_cls: rpn_terms.cls, rpn_reg: rpn_terms.reg, roi_cls, roi_reg, iou })
}

fn labeled_gts(views: &[AugmentedView]) -> Vec<Vec<GtBox>> {
    views
        .iter()
        .map(|v| v.annotations.iter().map(|a| GtBox { class_id: a.class_id, bbox: a.bbox, regress: true }).collect())
        .collect()
}

fn views(scenes: &[&Scene], kind: AugKind, seed: u64, step: u64, view: u64) -> Vec<AugmentedView> {
    scenes
        .iter()
        .map(|s| apply_augmentation(s, &AugmentationSpec::for_view(kind, seed, s.id, step, view)))
        .collect()
}

fn apply_gradients(state: &mut TeacherStudentState, tape: &mut Tape, loss: NodeId, lr: f64, momentum: f64) -> Result<()> {
    let grads = tape.backward(loss)?;
    state.student.zero_grad();
    grads.accumulate_into(&mut state.student);
    sgd_step(&mut state.student, &mut state.velocity, lr, momentum)
}

/// Supervised step on labeled scenes (weak augmentation) with the
/// uncertainty-aware ROI regression loss.
pub fn pretrain_step(det: &Detector, cfg: &PipelineConfig, state: &mut TeacherStudentState, labeled: &[&Scene]) -> Result<StepReport> {
    state.expect(Stage::Pretrain)?;
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let it = state.iteration;
    let lv = views(labeled, AugKind::Weak, cfg.seed, it, 0);
    let images: Vec<&Image> = lv.iter().map(|v| &v.image).collect();
    let mut rng = seeds::rng_for(cfg.seed, &[seeds::SAMPLING, it, 0]);
    let mut tape = Tape::new();
    let feats = det.backbone(&mut tape, &state.student, &images)?;
    let rpn = det.forward_rpn(&mut tape, &state.student, &feats)?;
    let reg = RoiRegLoss::Uncertainty { lambda_unc: cfg.lambda_unc };
    let sup = detection_losses(det, &mut tape, &state.student, &feats, &rpn, 0, &labeled_gts(&lv), &cfg.sampling, cfg.focal, reg, &mut rng)?;
    let mut total = sup.sum(&mut tape)?;
    let l_sup = tape.item(total);
    if let Some(iou) = sup.iou {
        total = tape.add(total, iou)?;
    }
    let report = StepReport {
        iteration: it,
        stage: Stage::Pretrain,
        l_sup,
        l_unsup: 0.0,
        l_ocl: 0.0,
        l_total: tape.item(total),
        rpn_cls: tape.item(sup.rpn_cls),
        rpn_reg: tape.item(sup.rpn_reg),
        roi_cls: tape.item(sup.roi_cls),
        roi_reg: tape.item(sup.roi_reg),
        iou_loss: sup.iou.map(|n| tape.item(n)),
        n_cls_labels: 0,
        n_reg_labels: 0,
        mean_sigma: f64::NAN,
        reg_subset_of_cls: true,
        ocl_objects: 0,
        ocl_degenerate: false,
    };
    apply_gradients(state, &mut tape, total, cfg.lr, cfg.momentum)?;
    state.iteration += 1;
    Ok(report)
}

/// Contrastive objects of one batch: boxes in the two strong views, with
/// teacher scores and classes.
struct OclObjects {
    in_a1: Vec<RoiRef>,
    in_a2: Vec<RoiRef>,
    scores: Vec<f64>,
    classes: Vec<usize>,
}

fn ocl_objects(
    det: &Detector,
    dets: &[Vec<Detection>],
    weak: &[AugmentedView],
    a1: &[AugmentedView],
    a2: &[AugmentedView],
    cfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> OclObjects {
    let s = det.config().image_size as f64;
    let mut o = OclObjects { in_a1: Vec::new(), in_a2: Vec::new(), scores: Vec::new(), classes: Vec::new() };
    for (i, ds) in dets.iter().enumerate() {
        // detections arrive sorted by score
        for d in ds.iter().take(cfg.ocl_objects_per_image) {
            let b = jitter_box(&d.bbox, (-cfg.jitter, cfg.jitter), s, rng);
            o.in_a1.push(RoiRef { image: i, bbox: weak[i].record.map_to(&a1[i].record, &b) });
            o.in_a2.push(RoiRef { image: i, bbox: weak[i].record.map_to(&a2[i].record, &b) });
            o.scores.push(d.score);
            o.classes.push(d.class_id);
        }
    }
    o
}

fn unit_rows(t: &Tensor) -> Vec<bool> {
    let (n, _) = t.dims2().unwrap_or((0, 0));
    (0..n).map(|r| (t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= UNIT_NORM_TOL).collect()
}

fn select_rows(t: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let (_, d) = t.dims2().ok_or_else(|| Error::shape("select_rows", format!("{:?}", t.shape())))?;
    Tensor::new(vec![keep.len(), d], keep.iter().flat_map(|&r| t.row(r).to_vec()).collect())
}

fn shifted(rois: &[RoiRef], keep: &[usize], offset: usize) -> Vec<RoiRef> {
    keep.iter().map(|&k| RoiRef { image: rois[k].image + offset, bbox: rois[k].bbox }).collect()
}

/// Mutual-learning step: supervised loss on labeled scenes, pseudo-label
/// loss on one strong view of the unlabeled scenes, and the contrastive
/// term across two strong views; then SGD on the student and EMA into the
/// teacher.
pub fn mutual_step(
    det: &Detector,
    cfg: &PipelineConfig,
    state: &mut TeacherStudentState,
    labeled: &[&Scene],
    unlabeled: &[&Scene],
) -> Result<StepReport> {
    state.expect(Stage::Mutual)?;
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let it = state.iteration;
    let lv = views(labeled, AugKind::Weak, cfg.seed, it, 0);
    let a0 = views(unlabeled, AugKind::Weak, cfg.seed, it, 1);
    let a1 = views(unlabeled, AugKind::Strong, cfg.seed, it, 2);
    let a2 = views(unlabeled, AugKind::Strong, cfg.seed, it, 3);
    let (nl, nu) = (lv.len(), a0.len());

    let teacher = state.teacher()?;
    let mut jitter_rng = seeds::rng_for(cfg.seed, &[seeds::JITTER, it]);
    let a0_images: Vec<&Image> = a0.iter().map(|v| &v.image).collect();
    let (dets, labels) = generate_pseudo_labels(det, teacher, &a0_images, cfg, &mut jitter_rng)?;

    // teacher embeddings of the contrastive objects in both strong views
    let objs = ocl_objects(det, &dets, &a0, &a1, &a2, cfg, &mut jitter_rng);
    let mut ocl_keep: Vec<usize> = Vec::new();
    let mut teacher_z: Option<(Tensor, Tensor)> = None;
    if cfg.ocl && objs.scores.len() >= 2 {
        let mut tt = Tape::new();
        let strong: Vec<&Image> = a1.iter().chain(a2.iter()).map(|v| &v.image).collect();
        let feats = det.backbone(&mut tt, teacher, &strong)?;
        let all: Vec<usize> = (0..objs.scores.len()).collect();
        let z1 = det.embed(&mut tt, teacher, &feats, &objs.in_a1, Role::Teacher)?;
        let z2 = det.embed(&mut tt, teacher, &feats, &shifted(&objs.in_a2, &all, nu), Role::Teacher)?;
        let (z1, z2) = (tt.value(z1.z).clone(), tt.value(z2.z).clone());
        let (u1, u2) = (unit_rows(&z1), unit_rows(&z2));
        ocl_keep = all.into_iter().filter(|&k| u1[k] && u2[k]).collect();
        if ocl_keep.len() >= 2 {
            teacher_z = Some((select_rows(&z1, &ocl_keep)?, select_rows(&z2, &ocl_keep)?));
        }
    }

    // student: labeled views, then A1, then A2 when contrastive objects exist
    let mut images: Vec<&Image> = lv.iter().map(|v| &v.image).collect();
    images.extend(a1.iter().map(|v| &v.image));
    if teacher_z.is_some() {
        images.extend(a2.iter().map(|v| &v.image));
    }
    let mut tape = Tape::new();
    let student = &state.student;
    let feats = det.backbone(&mut tape, student, &images)?;
    let rpn = det.forward_rpn(&mut tape, student, &feats)?;
    let mut rng = seeds::rng_for(cfg.seed, &[seeds::SAMPLING, it, 0]);
    let unc = RoiRegLoss::Uncertainty { lambda_unc: cfg.lambda_unc };
    let sup = detection_losses(det, &mut tape, student, &feats, &rpn, 0, &labeled_gts(&lv), &cfg.sampling, cfg.focal, unc, &mut rng)?;
    let mut sup_total = sup.sum(&mut tape)?;
    let l_sup = tape.item(sup_total);
    if let Some(iou) = sup.iou {
        sup_total = tape.add(sup_total, iou)?;
    }

    let unsup = if labels.cls_count() == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let gts: Vec<Vec<GtBox>> = (0..nu)
            .map(|i| {
                labels.cls_set[i]
                    .iter()
                    .map(|d| GtBox {
                        class_id: d.class_id,
                        bbox: a0[i].record.map_to(&a1[i].record, &d.bbox),
                        regress: labels.reg_set[i].contains(d),
                    })
                    .collect()
            })
            .collect();
        let mut urng = seeds::rng_for(cfg.seed, &[seeds::SAMPLING, it, 1]);
        let u = detection_losses(det, &mut tape, student, &feats, &rpn, nl, &gts, &cfg.sampling, cfg.focal, RoiRegLoss::SmoothL1, &mut urng)?;
        u.sum(&mut tape)?
    };

    let mut bn_stats: Vec<BnBatchStats> = Vec::new();
    let (ocl, ocl_degenerate) = match &teacher_z {
        Some((t1, t2)) => {
            let s1 = det.embed(&mut tape, student, &feats, &shifted(&objs.in_a1, &ocl_keep, nl), Role::Student)?;
            let s2 = det.embed(&mut tape, student, &feats, &shifted(&objs.in_a2, &ocl_keep, nl + nu), Role::Student)?;
            bn_stats.extend(s1.bn_stats);
            bn_stats.extend(s2.bn_stats);
            let t1 = tape.constant(t1.clone());
            let t2 = tape.constant(t2.clone());
            let scores: Vec<f64> = ocl_keep.iter().map(|&k| objs.scores[k]).collect();
            let classes: Vec<usize> = ocl_keep.iter().map(|&k| objs.classes[k]).collect();
            let pairing = pairing_weights(&scores, &classes, cfg.thresholds.t_cont);
            let v1 = RoiEmbeddingBatch { student: s2.z, teacher: t1 };
            let v2 = RoiEmbeddingBatch { student: s1.z, teacher: t2 };
            let l = ocl_loss(&mut tape, &v1, &v2, &pairing, cfg.thresholds.tau)?;
            (l.loss, l.degenerate)
        }
        None => (tape.constant(Tensor::scalar(0.0)), true),
    };
    let lambda_ocl = if cfg.ocl { cfg.lambda_ocl } else { 0.0 };
    let total = total_loss(&mut tape, sup_total, unsup, ocl, cfg.lambda_unsup, lambda_ocl)?;

    let report = StepReport {
        iteration: it,
        stage: Stage::Mutual,
        l_sup,
        l_unsup: tape.item(unsup),
        l_ocl: tape.item(ocl),
        l_total: tape.item(total),
        rpn_cls: tape.item(sup.rpn_cls),
        rpn_reg: tape.item(sup.rpn_reg),
        roi_cls: tape.item(sup.roi_cls),
        roi_reg: tape.item(sup.roi_reg),
        iou_loss: sup.iou.map(|n| tape.item(n)),
        n_cls_labels: labels.cls_count(),
        n_reg_labels: labels.reg_count(),
        mean_sigma: labels.mean_sigma(),
        reg_subset_of_cls: labels.is_nested(),
        ocl_objects: if teacher_z.is_some() { ocl_keep.len() } else { 0 },
        ocl_degenerate,
    };
    apply_gradients(state, &mut tape, total, cfg.lr, cfg.momentum)?;
    update_running_stats(&mut state.student, &bn_stats, BN_MOMENTUM)?;
    state.ema_update()?;
    state.iteration += 1;
    Ok(report)
}
