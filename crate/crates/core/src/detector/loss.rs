//! RPN and ROI-head loss terms over sampled targets.

use std::sync::Arc;

use super::targets::{AnchorTargets, RoiSample};
use super::{RoiOutput, RpnOutput};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::losses::{cross_entropy, focal_loss, smooth_l1, uncertainty_reg_loss};

pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: FOCAL_GAMMA, alpha: FOCAL_ALPHA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RoiRegLoss {
    /// Attenuated loss with a learned per-boundary log-variance.
    Uncertainty { lambda_unc: f64 },
    SmoothL1,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: NodeId,
    pub reg: NodeId,
}

fn zero(tape: &mut Tape) -> NodeId {
    tape.constant(Tensor::scalar(0.0))
}

fn gather_rows(tape: &mut Tape, x: NodeId, rows: &[usize], width: usize, col_offset: impl Fn(usize) -> usize) -> Result<NodeId> {
    let stride = tape.value(x).shape().last().copied().unwrap_or(1);
    let index: Vec<Option<usize>> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, &r)| {
            let base = r * stride + col_offset(i);
            (0..width).map(move |j| Some(base + j))
        })
        .collect();
    tape.gather(x, Arc::new(index), &[rows.len(), width])
}

/// Binary objectness cross-entropy and smooth-L1 box regression.
pub fn rpn_losses(tape: &mut Tape, rpn: &RpnOutput, t: &AnchorTargets) -> Result<LossTerms> {
    let cls = if t.cls_index.is_empty() {
        zero(tape)
    } else {
        let m = t.cls_index.len();
        let index = Arc::new(t.cls_index.iter().map(|&i| Some(i)).collect());
        let logit = tape.gather(rpn.objectness, index, &[m, 1])?;
        // a two-way softmax over (0, logit) is the logistic loss on logit
        let zeros = tape.constant(Tensor::zeros(&[m, 1]));
        let pair = tape.concat(&[zeros, logit], 1)?;
        cross_entropy(tape, pair, &t.cls_label)?
    };
    let reg = if t.reg_index.is_empty() {
        zero(tape)
    } else {
        let pred = gather_rows(tape, rpn.offsets, &t.reg_index, 4, |_| 0)?;
        let target = tape.constant(Tensor::new(vec![t.reg_index.len(), 4], t.reg_target.clone())?);
        smooth_l1(tape, pred, target, SMOOTH_L1_BETA)?
    };
    Ok(LossTerms { cls, reg })
}

/// Focal classification over all samples, box regression over samples with
/// a regression target. With an IoU branch, also returns its smooth-L1 loss
/// toward the IoU of foreground samples.
pub fn roi_losses(
    tape: &mut Tape,
    roi: &RoiOutput,
    samples: &[RoiSample],
    num_classes: usize,
    focal: FocalParams,
    reg_loss: RoiRegLoss,
) -> Result<(LossTerms, Option<NodeId>)> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cls = focal_loss(tape, roi.cls_logits, &labels, focal.gamma, focal.alpha)?;
    let reg_rows: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].reg_target.is_some()).collect();
    let reg = if reg_rows.is_empty() {
        zero(tape)
    } else {
        let pred = gather_rows(tape, roi.offsets, &reg_rows, 4, |_| 0)?;
        let target: Vec<f64> = reg_rows.iter().flat_map(|&i| samples[i].reg_target.unwrap_or_default()).collect();
        let target = tape.constant(Tensor::new(vec![reg_rows.len(), 4], target)?);
        match reg_loss {
            RoiRegLoss::SmoothL1 => smooth_l1(tape, pred, target, SMOOTH_L1_BETA)?,
            RoiRegLoss::Uncertainty { lambda_unc } => {
                let cls_of: Vec<usize> = reg_rows.iter().map(|&i| samples[i].label).collect();
                let lv = gather_rows(tape, roi.log_var, &reg_rows, 4, |i| 4 * cls_of[i])?;
                uncertainty_reg_loss(tape, pred, target, lv, lambda_unc, SMOOTH_L1_BETA)?
            }
        }
    };
    let iou = match roi.iou {
        None => None,
        Some(node) => {
            let fg: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label < num_classes).collect();
            Some(if fg.is_empty() {
                zero(tape)
            } else {
                let cls_of: Vec<usize> = fg.iter().map(|&i| samples[i].label).collect();
                let pred = gather_rows(tape, node, &fg, 1, |i| cls_of[i])?;
                let target = tape.constant(Tensor::new(vec![fg.len(), 1], fg.iter().map(|&i| samples[i].gt_iou).collect())?);
                smooth_l1(tape, pred, target, SMOOTH_L1_BETA)?
            })
        }
    };
    Ok((LossTerms { cls, reg }, iou))
}
