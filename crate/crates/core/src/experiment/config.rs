//! Flat `key = value` experiment configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! thresholds.t_reg = 0.5
//! modules.ocl = false
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detector::{DetectorConfig, FocalParams, SamplingConfig};
use crate::error::{Error, Result};
use crate::pipeline::{FilterThresholds, LocQuality, PipelineConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub labeled_fraction: f64,
    pub test_scenes: usize,
    pub pretrain_iters: usize,
    /// Pre-training plus mutual-learning iterations.
    pub total_iters: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
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
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub teacher_score_thresh: f64,
    pub teacher_nms_iou: f64,
    pub ocl_objects_per_image: usize,
    pub jitter: f64,
    pub box_jitter_thresh: f64,
    pub box_jitter_samples: usize,
    pub predicted_iou_thresh: f64,
    /// Ledger evaluation every this many iterations (0: only at the end).
    pub eval_interval: usize,
    pub eval_score_thresh: f64,
    pub eval_nms_iou: f64,
    /// Score floor of detections entering the uncertainty correlation.
    pub correlation_min_score: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        ExperimentConfig {
            seed: 0,
            num_scenes: 1000,
            labeled_fraction: 0.1,
            test_scenes: 200,
            pretrain_iters: 3000,
            total_iters: 4000,
            labeled_batch: 8,
            unlabeled_batch: 8,
            thresholds: p.thresholds,
            lambda_unsup: p.lambda_unsup,
            lambda_ocl: p.lambda_ocl,
            lambda_unc: p.lambda_unc,
            ocl: true,
            rupl: true,
            loc_quality: LocQuality::Uncertainty,
            ema_momentum: p.ema_momentum,
            lr: p.lr,
            momentum: p.momentum,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            teacher_score_thresh: p.teacher_score_thresh,
            teacher_nms_iou: p.teacher_nms_iou,
            ocl_objects_per_image: p.ocl_objects_per_image,
            jitter: p.jitter,
            box_jitter_thresh: p.box_jitter_thresh,
            box_jitter_samples: p.box_jitter_samples,
            predicted_iou_thresh: p.predicted_iou_thresh,
            eval_interval: 500,
            eval_score_thresh: 0.05,
            eval_nms_iou: 0.5,
            correlation_min_score: 0.5,
            output_dir: PathBuf::from("run"),
        }
    }
}

fn err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), msg: msg.into() }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(err(key, format!("expected true/false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 36] = [
        "seed",
        "dataset.num_scenes",
        "dataset.labeled_fraction",
        "dataset.test_scenes",
        "schedule.pretrain_iters",
        "schedule.total_iters",
        "schedule.labeled_batch",
        "schedule.unlabeled_batch",
        "thresholds.t_cls",
        "thresholds.t_cont",
        "thresholds.t_reg",
        "thresholds.tau",
        "lambdas.unsup",
        "lambdas.ocl",
        "lambdas.unc",
        "modules.ocl",
        "modules.rupl",
        "modules.loc_quality",
        "ema.momentum",
        "optim.lr",
        "optim.momentum",
        "loss.focal_gamma",
        "loss.focal_alpha",
        "teacher.score_thresh",
        "teacher.nms_iou",
        "ocl.objects_per_image",
        "ocl.jitter",
        "loc.box_jitter_thresh",
        "loc.box_jitter_samples",
        "loc.predicted_iou_thresh",
        "eval.interval",
        "eval.score_thresh",
        "eval.nms_iou",
        "eval.correlation_min_score",
        "output.dir",
        "schedule.mutual_iters",
    ];

    /// Sets one key from its text form; the value is not range-checked
    /// until [`ExperimentConfig::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "dataset.num_scenes" => self.num_scenes = num(key, v)?,
            "dataset.labeled_fraction" => self.labeled_fraction = num(key, v)?,
            "dataset.test_scenes" => self.test_scenes = num(key, v)?,
            "schedule.pretrain_iters" => self.pretrain_iters = num(key, v)?,
            "schedule.total_iters" => self.total_iters = num(key, v)?,
            "schedule.mutual_iters" => self.total_iters = self.pretrain_iters + num::<usize>(key, v)?,
            "schedule.labeled_batch" => self.labeled_batch = num(key, v)?,
            "schedule.unlabeled_batch" => self.unlabeled_batch = num(key, v)?,
            "thresholds.t_cls" => self.thresholds.t_cls = num(key, v)?,
            "thresholds.t_cont" => self.thresholds.t_cont = num(key, v)?,
            "thresholds.t_reg" => self.thresholds.t_reg = num(key, v)?,
            "thresholds.tau" => self.thresholds.tau = num(key, v)?,
            "lambdas.unsup" => self.lambda_unsup = num(key, v)?,
            "lambdas.ocl" => self.lambda_ocl = num(key, v)?,
            "lambdas.unc" => self.lambda_unc = num(key, v)?,
            "modules.ocl" => self.ocl = flag(key, v)?,
            "modules.rupl" => self.rupl = flag(key, v)?,
            "modules.loc_quality" => {
                self.loc_quality = LocQuality::parse(v)
                    .ok_or_else(|| err(key, format!("expected uncertainty, box_jitter or predicted_iou, got `{v}`")))?
            }
            "ema.momentum" => self.ema_momentum = num(key, v)?,
            "optim.lr" => self.lr = num(key, v)?,
            "optim.momentum" => self.momentum = num(key, v)?,
            "loss.focal_gamma" => self.focal_gamma = num(key, v)?,
            "loss.focal_alpha" => self.focal_alpha = num(key, v)?,
            "teacher.score_thresh" => self.teacher_score_thresh = num(key, v)?,
            "teacher.nms_iou" => self.teacher_nms_iou = num(key, v)?,
            "ocl.objects_per_image" => self.ocl_objects_per_image = num(key, v)?,
            "ocl.jitter" => self.jitter = num(key, v)?,
            "loc.box_jitter_thresh" => self.box_jitter_thresh = num(key, v)?,
            "loc.box_jitter_samples" => self.box_jitter_samples = num(key, v)?,
            "loc.predicted_iou_thresh" => self.predicted_iou_thresh = num(key, v)?,
            "eval.interval" => self.eval_interval = num(key, v)?,
            "eval.score_thresh" => self.eval_score_thresh = num(key, v)?,
            "eval.nms_iou" => self.eval_nms_iou = num(key, v)?,
            "eval.correlation_min_score" => self.correlation_min_score = num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| err(o, "expected key=value"))?;
            self.set(k.trim().trim_start_matches("--"), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config",
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in [`ExperimentConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let t = &self.thresholds;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("dataset.num_scenes", self.num_scenes.to_string());
        kv("dataset.labeled_fraction", self.labeled_fraction.to_string());
        kv("dataset.test_scenes", self.test_scenes.to_string());
        kv("schedule.pretrain_iters", self.pretrain_iters.to_string());
        kv("schedule.total_iters", self.total_iters.to_string());
        kv("schedule.labeled_batch", self.labeled_batch.to_string());
        kv("schedule.unlabeled_batch", self.unlabeled_batch.to_string());
        kv("thresholds.t_cls", t.t_cls.to_string());
        kv("thresholds.t_cont", t.t_cont.to_string());
        kv("thresholds.t_reg", t.t_reg.to_string());
        kv("thresholds.tau", t.tau.to_string());
        kv("lambdas.unsup", self.lambda_unsup.to_string());
        kv("lambdas.ocl", self.lambda_ocl.to_string());
        kv("lambdas.unc", self.lambda_unc.to_string());
        kv("modules.ocl", self.ocl.to_string());
        kv("modules.rupl", self.rupl.to_string());
        kv("modules.loc_quality", self.loc_quality.as_str().to_string());
        kv("ema.momentum", self.ema_momentum.to_string());
        kv("optim.lr", self.lr.to_string());
        kv("optim.momentum", self.momentum.to_string());
        kv("loss.focal_gamma", self.focal_gamma.to_string());
        kv("loss.focal_alpha", self.focal_alpha.to_string());
        kv("teacher.score_thresh", self.teacher_score_thresh.to_string());
        kv("teacher.nms_iou", self.teacher_nms_iou.to_string());
        kv("ocl.objects_per_image", self.ocl_objects_per_image.to_string());
        kv("ocl.jitter", self.jitter.to_string());
        kv("loc.box_jitter_thresh", self.box_jitter_thresh.to_string());
        kv("loc.box_jitter_samples", self.box_jitter_samples.to_string());
        kv("loc.predicted_iou_thresh", self.predicted_iou_thresh.to_string());
        kv("eval.interval", self.eval_interval.to_string());
        kv("eval.score_thresh", self.eval_score_thresh.to_string());
        kv("eval.nms_iou", self.eval_nms_iou.to_string());
        kv("eval.correlation_min_score", self.correlation_min_score.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| if v == 0 { Err(err(key, "must be positive")) } else { Ok(()) };
        let unit = |key: &str, v: f64, lo_open: bool| {
            let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(err(key, format!("must be in {}0, 1], got {v}", if lo_open { "(" } else { "[" })))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(err(key, format!("must be a finite value >= 0, got {v}")))
            }
        };
        positive("dataset.num_scenes", self.num_scenes)?;
        positive("dataset.test_scenes", self.test_scenes)?;
        unit("dataset.labeled_fraction", self.labeled_fraction, true)?;
        if self.labeled_fraction >= 1.0 {
            return Err(err("dataset.labeled_fraction", "needs unlabeled scenes, got 1"));
        }
        let labeled = (self.num_scenes as f64 * self.labeled_fraction).round() as usize;
        if labeled == 0 || labeled == self.num_scenes {
            return Err(err("dataset.labeled_fraction", format!("gives {labeled} labeled of {} scenes", self.num_scenes)));
        }
        positive("schedule.labeled_batch", self.labeled_batch)?;
        positive("schedule.unlabeled_batch", self.unlabeled_batch)?;
        if self.total_iters < self.pretrain_iters {
            return Err(err(
                "schedule.total_iters",
                format!("{} is below schedule.pretrain_iters = {}", self.total_iters, self.pretrain_iters),
            ));
        }
        self.thresholds.validate()?;
        non_negative("lambdas.unsup", self.lambda_unsup)?;
        non_negative("lambdas.ocl", self.lambda_ocl)?;
        non_negative("lambdas.unc", self.lambda_unc)?;
        unit("ema.momentum", self.ema_momentum, false)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(err("optim.lr", format!("must be > 0, got {}", self.lr)));
        }
        unit("optim.momentum", self.momentum, false)?;
        non_negative("loss.focal_gamma", self.focal_gamma)?;
        unit("loss.focal_alpha", self.focal_alpha, true)?;
        unit("teacher.score_thresh", self.teacher_score_thresh, false)?;
        unit("teacher.nms_iou", self.teacher_nms_iou, true)?;
        positive("ocl.objects_per_image", self.ocl_objects_per_image)?;
        unit("ocl.jitter", self.jitter, false)?;
        non_negative("loc.box_jitter_thresh", self.box_jitter_thresh)?;
        if self.box_jitter_samples < 2 {
            return Err(err("loc.box_jitter_samples", "needs at least 2"));
        }
        unit("loc.predicted_iou_thresh", self.predicted_iou_thresh, false)?;
        unit("eval.score_thresh", self.eval_score_thresh, false)?;
        unit("eval.nms_iou", self.eval_nms_iou, true)?;
        unit("eval.correlation_min_score", self.correlation_min_score, false)?;
        Ok(())
    }

    pub fn mutual_iters(&self) -> usize {
        self.total_iters - self.pretrain_iters
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig { predicted_iou: self.loc_quality == LocQuality::PredictedIou, ..DetectorConfig::default() }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            thresholds: self.thresholds,
            lambda_unsup: self.lambda_unsup,
            lambda_ocl: self.lambda_ocl,
            lambda_unc: self.lambda_unc,
            ocl: self.ocl,
            rupl: self.rupl,
            loc_quality: self.loc_quality,
            ema_momentum: self.ema_momentum,
            lr: self.lr,
            momentum: self.momentum,
            teacher_score_thresh: self.teacher_score_thresh,
            teacher_nms_iou: self.teacher_nms_iou,
            ocl_objects_per_image: self.ocl_objects_per_image,
            jitter: self.jitter,
            box_jitter_thresh: self.box_jitter_thresh,
            box_jitter_samples: self.box_jitter_samples,
            predicted_iou_thresh: self.predicted_iou_thresh,
            sampling: SamplingConfig::default(),
            focal: FocalParams { gamma: self.focal_gamma, alpha: self.focal_alpha },
            seed: self.seed,
        }
    }

    /// The settings that determine the pre-training stage; runs with equal
    /// keys share the same pre-trained student.
    pub fn pretrain_key(&self) -> String {
        format!(
            "seed={} scenes={} frac={} iters={} batch={} lr={} mom={} focal=({},{}) unc={} iou_branch={}",
            self.seed,
            self.num_scenes,
            self.labeled_fraction,
            self.pretrain_iters,
            self.labeled_batch,
            self.lr,
            self.momentum,
            self.focal_gamma,
            self.focal_alpha,
            self.lambda_unc,
            self.loc_quality == LocQuality::PredictedIou,
        )
    }
}
