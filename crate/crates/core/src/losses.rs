//! Detection, uncertainty and object-wise contrastive losses, each a pure
//! function from tape nodes to a scalar loss node.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Range applied to the log-variance `alpha = ln(sigma^2)` before use.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

fn check_targets(tape: &Tape, logits: NodeId, targets: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = tape
        .value(logits)
        .dims2()
        .ok_or_else(|| Error::shape("cross_entropy", format!("{:?}", tape.value(logits).shape())))?;
    if targets.len() != b {
        return Err(Error::shape("cross_entropy", format!("{b} rows, {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("target class {t} out of range for {k} classes")));
    }
    Ok((b, k))
}

/// Log-probability of the target class of every row, shape `[B]`.
fn target_log_probs(tape: &mut Tape, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let (b, k) = check_targets(tape, logits, targets)?;
    let logp = tape.log_softmax(logits)?;
    let index = Arc::new(targets.iter().enumerate().map(|(r, &t)| Some(r * k + t)).collect());
    tape.gather(logp, index, &[b])
}

/// Mean negative log-softmax of the target class.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let lp = target_log_probs(tape, logits, targets)?;
    let m = tape.mean(lp)?;
    tape.neg(m)
}

/// Softmax focal loss: mean of `-alpha (1 - p_t)^gamma ln p_t`.
pub fn focal_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    gamma: f64,
    alpha: f64,
) -> Result<NodeId> {
    if gamma < 0.0 || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("focal loss needs gamma >= 0 and alpha in (0,1], got {gamma}, {alpha}")));
    }
    let lp = target_log_probs(tape, logits, targets)?;
    let weighted = if gamma == 0.0 {
        lp
    } else {
        let p = tape.exp(lp)?;
        let np = tape.neg(p)?;
        let one_minus = tape.add_scalar(np, 1.0)?;
        let modulator = tape.powf(one_minus, gamma)?;
        tape.mul(modulator, lp)?
    };
    let m = tape.mean(weighted)?;
    tape.mul_scalar(m, -alpha)
}

/// Mean smooth-L1 of `pred - target` with transition `beta`.
pub fn smooth_l1(tape: &mut Tape, pred: NodeId, target: NodeId, beta: f64) -> Result<NodeId> {
    let diff = elementwise_diff(tape, pred, target, "smooth_l1")?;
    let s = tape.smooth_l1(diff, beta)?;
    tape.mean(s)
}

fn elementwise_diff(tape: &mut Tape, a: NodeId, b: NodeId, op: &'static str) -> Result<NodeId> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    tape.sub(a, b)
}

/// Uncertainty-aware box regression applied per boundary:
/// mean over all `B x 4` entries of `exp(-alpha) * smoothL1(pred - target) + lambda_unc * alpha`,
/// where `alpha = ln(sigma^2)` is clamped to [`LOG_VAR_CLAMP`].
pub fn uncertainty_reg_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    log_var: NodeId,
    lambda_unc: f64,
    beta: f64,
) -> Result<NodeId> {
    if lambda_unc < 0.0 {
        return Err(Error::invalid(format!("lambda_unc must be >= 0, got {lambda_unc}")));
    }
    if tape.value(log_var).data().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("log-variance contains NaN"));
    }
    let diff = elementwise_diff(tape, pred, target, "uncertainty_reg_loss")?;
    if tape.value(log_var).shape() != tape.value(diff).shape() {
        return Err(Error::shape(
            "uncertainty_reg_loss",
            format!("log-variance {:?} vs offsets {:?}", tape.value(log_var).shape(), tape.value(diff).shape()),
        ));
    }
    let sl = tape.smooth_l1(diff, beta)?;
    let a = tape.clamp(log_var, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)?;
    let na = tape.neg(a)?;
    let inv_var = tape.exp(na)?;
    let data_term = tape.mul(inv_var, sl)?;
    let reg_term = tape.mul_scalar(a, lambda_unc)?;
    let per_elem = tape.add(data_term, reg_term)?;
    tape.mean(per_elem)
}

/// Confidence-aware pairing weights of one batch of ROI objects.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingMatrix {
    size: usize,
    weights: Vec<f64>,
    positive_counts: Vec<usize>,
}

impl PairingMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weight(&self, n: usize, m: usize) -> f64 {
        self.weights[n * self.size + m]
    }

    /// Row-major `size x size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of entries with `w > 0` in each row, diagonal included.
    pub fn positive_counts(&self) -> &[usize] {
        &self.positive_counts
    }

    /// Identity pairing: every object is positive only with itself.
    pub fn identity(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        for i in 0..size {
            weights[i * size + i] = 1.0;
        }
        PairingMatrix {
            size,
            weights,
            positive_counts: vec![1; size],
        }
    }
}

/// `w_nm = 1` on the diagonal, `p_n p_m` for distinct objects of the same
/// predicted class whose scores both exceed `t_cont`, else 0.
pub fn pairing_weights(scores: &[f64], classes: &[usize], t_cont: f64) -> PairingMatrix {
    assert_eq!(scores.len(), classes.len(), "scores and classes must align");
    let n = scores.len();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            weights[i * n + j] = if i == j {
                1.0
            } else if classes[i] == classes[j] && scores[i] > t_cont && scores[j] > t_cont {
                scores[i] * scores[j]
            } else {
                0.0
            };
        }
    }
    let positive_counts = weights
        .chunks(n.max(1))
        .take(n)
        .map(|row| row.iter().filter(|&&w| w > 0.0).count())
        .collect();
    PairingMatrix {
        size: n,
        weights,
        positive_counts,
    }
}

/// Unit-norm ROI embeddings of one view: row `n` of `student` and of
/// `teacher` come from the same object.
#[derive(Clone, Copy, Debug)]
pub struct RoiEmbeddingBatch {
    pub student: NodeId,
    pub teacher: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub loss: NodeId,
    /// Fewer than two objects: the denominator is empty and the loss is 0.
    pub degenerate: bool,
}

const UNIT_NORM_TOL: f64 = 1e-9;

fn check_embeddings(tape: &Tape, batch: &RoiEmbeddingBatch, size: usize) -> Result<(usize, usize)> {
    let s = tape.value(batch.student);
    let t = tape.value(batch.teacher);
    let (n, d) = s
        .dims2()
        .ok_or_else(|| Error::shape("contrastive_loss", format!("student {:?}", s.shape())))?;
    if t.shape() != s.shape() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("student {:?} vs teacher {:?}", s.shape(), t.shape()),
        ));
    }
    if size != n {
        return Err(Error::shape("contrastive_loss", format!("pairing of size {size} for {n} objects")));
    }
    for tensor in [s, t] {
        for r in 0..n {
            let norm = tensor.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("embedding row {r} has norm {norm}")));
            }
        }
    }
    Ok((n, d))
}

/// Object-wise contrastive loss of one view.
///
/// For each object `n`, the log-ratio of `exp(s_n . t_m / tau)` against the
/// sum over all `l != n` of `exp(s_n . t_l / tau)` is averaged over the
/// positives `m` with weights `w_nm`, normalized by the number of positive
/// entries in row `n` (not by the weight sum), then averaged over objects.
/// Teacher embeddings are detached.
pub fn contrastive_loss(
    tape: &mut Tape,
    batch: &RoiEmbeddingBatch,
    pairing: &PairingMatrix,
    tau: f64,
) -> Result<ContrastiveLoss> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let (n, _) = check_embeddings(tape, batch, pairing.size())?;
    if n < 2 {
        return Ok(ContrastiveLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            degenerate: true,
        });
    }
    let teacher = tape.detach(batch.teacher)?;
    let teacher_t = tape.transpose(teacher)?;
    let sim = tape.matmul(batch.student, teacher_t)?;
    let logits = tape.mul_scalar(sim, 1.0 / tau)?;
    let off_diag = Arc::new((0..n * n).map(|i| i / n != i % n).collect());
    let lse = tape.logsumexp_last(logits, Some(off_diag))?;
    let row_index = Arc::new((0..n * n).map(|i| Some(i / n)).collect());
    let lse_rows = tape.gather(lse, row_index, &[n, n])?;
    let log_ratio = tape.sub(logits, lse_rows)?;

    let coef: Vec<f64> = (0..n * n)
        .map(|i| {
            let row = i / n;
            pairing.weights()[i] / (pairing.positive_counts()[row] as f64 * n as f64)
        })
        .collect();
    let coef = tape.constant(Tensor::new(vec![n, n], coef)?);
    let weighted = tape.mul(log_ratio, coef)?;
    let total = tape.sum(weighted)?;
    Ok(ContrastiveLoss {
        loss: tape.neg(total)?,
        degenerate: false,
    })
}

/// Symmetrized object-wise contrastive loss: the mean of the loss on
/// `view1` and on `view2`, where `view2` is the same objects with the two
/// strong augmentations swapped between teacher and student.
pub fn ocl_loss(
    tape: &mut Tape,
    view1: &RoiEmbeddingBatch,
    view2: &RoiEmbeddingBatch,
    pairing: &PairingMatrix,
    tau: f64,
) -> Result<ContrastiveLoss> {
    let a = contrastive_loss(tape, view1, pairing, tau)?;
    let b = contrastive_loss(tape, view2, pairing, tau)?;
    let sum = tape.add(a.loss, b.loss)?;
    Ok(ContrastiveLoss {
        loss: tape.mul_scalar(sum, 0.5)?,
        degenerate: a.degenerate || b.degenerate,
    })
}

/// Sum of the RPN and ROI classification and regression terms.
pub fn supervised_loss(
    tape: &mut Tape,
    rpn_cls: NodeId,
    rpn_reg: NodeId,
    roi_cls: NodeId,
    roi_reg: NodeId,
) -> Result<NodeId> {
    let a = tape.add(rpn_cls, rpn_reg)?;
    let b = tape.add(a, roi_cls)?;
    tape.add(b, roi_reg)
}

/// `sup + lambda_unsup * unsup + lambda_ocl * ocl`.
pub fn total_loss(
    tape: &mut Tape,
    sup: NodeId,
    unsup: NodeId,
    ocl: NodeId,
    lambda_unsup: f64,
    lambda_ocl: f64,
) -> Result<NodeId> {
    if lambda_unsup < 0.0 || lambda_ocl < 0.0 {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    let u = tape.mul_scalar(unsup, lambda_unsup)?;
    let o = tape.mul_scalar(ocl, lambda_ocl)?;
    let s = tape.add(sup, u)?;
    tape.add(s, o)
}

#[cfg(test)]
mod tests;
