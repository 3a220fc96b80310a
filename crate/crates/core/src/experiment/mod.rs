//! End-to-end experiments: dataset generation, the two training stages with
//! a per-iteration ledger, held-out evaluation, and run artifacts.

mod config;
mod grid;
mod ledger;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use config::ExperimentConfig;
pub use grid::{ablation_cells, run_cells, treg_cells, treg_sweep_csv, Cell, CellResult, GridReport, MetricStats, Summary, MAX_CELLS};
pub use ledger::{ledger_from_csv, ledger_to_csv, LedgerRow, LEDGER_HEADER};

use crate::autodiff::{checkpoint, ParamKind, ParamStore, Tensor};
use crate::detector::{write_detections, DetectionRecord, Detector};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, matched_pairs, uncertainty_iou_correlation, ApReport, CorrelationReport, GroundTruth};
use crate::pipeline::{mutual_step, pretrain_step, TeacherStudentState};
use crate::scenes::{generate_dataset, Image, Scene, Split};
use crate::seeds;

const EVAL_BATCH: usize = 25;

/// Training scenes (labeled and unlabeled) plus held-out test scenes drawn
/// from an independent seed stream.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let train = generate_dataset(cfg.num_scenes, cfg.labeled_fraction, cfg.seed)?;
        let test = generate_dataset(cfg.test_scenes, 1.0, test_seed(cfg.seed))?;
        Ok(Dataset { train, test })
    }

    pub fn labeled(&self) -> Vec<&Scene> {
        self.train.iter().filter(|s| s.split == Split::Labeled).collect()
    }

    pub fn unlabeled(&self) -> Vec<&Scene> {
        self.train.iter().filter(|s| s.split == Split::Unlabeled).collect()
    }
}

pub fn test_seed(seed: u64) -> u64 {
    seeds::derive_seed(seed, &[seeds::TEST])
}

/// Epoch-shuffled batches over a fixed index set. The batch of an iteration
/// depends only on the seed, stream and iteration, so training resumed from
/// a checkpoint sees the same batches as an uninterrupted run.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    seed: u64,
    stream: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        BatchSampler { len, seed, stream, epoch: None }
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut ids: Vec<usize> = (0..self.len).collect();
            ids.shuffle(&mut seeds::rng_for(self.seed, &[seeds::BATCH, self.stream, epoch]));
            self.epoch = Some((epoch, ids));
        }
        self.epoch.as_ref().map(|e| e.1.as_slice()).unwrap_or(&[])
    }

    /// Indices into the sampled set for iteration `it` with batch size `n`.
    pub fn batch(&mut self, it: u64, n: usize) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let start = it as usize * n;
        (start..start + n)
            .map(|p| {
                let (e, k) = ((p / self.len) as u64, p % self.len);
                self.order(e)[k]
            })
            .collect()
    }
}

/// Detections, AP and uncertainty correlation of one model on scenes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<DetectionRecord>,
    pub ap: ApReport,
    /// `None` when too few confident detections overlap ground truth.
    pub correlation: Option<CorrelationReport>,
}

pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| s.annotations.iter().map(move |a| GroundTruth { image_id: s.id, class_id: a.class_id, bbox: a.bbox }))
        .collect()
}

pub fn evaluate_store(det: &Detector, store: &ParamStore, scenes: &[Scene], cfg: &ExperimentConfig) -> Result<Evaluation> {
    let mut records = Vec::new();
    for chunk in scenes.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let dets = det.detect(store, &images, cfg.eval_score_thresh, cfg.eval_nms_iou)?;
        for (s, ds) in chunk.iter().zip(dets) {
            records.extend(ds.into_iter().map(|d| DetectionRecord { image_id: s.id, detection: d }));
        }
    }
    let gts = ground_truth(scenes);
    let ap = evaluate(&records, &gts, det.config().num_classes);
    let correlation = match uncertainty_iou_correlation(&matched_pairs(&records, &gts, cfg.correlation_min_score)) {
        Ok(r) => Some(r),
        Err(Error::InsufficientSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation { records, ap, correlation })
}

/// Progress lines on stderr when enabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct Progress(pub bool);

impl Progress {
    fn line(&self, msg: impl FnOnce() -> String) {
        if self.0 {
            eprintln!("{}", msg());
        }
    }
}

/// State at the end of the pre-training stage.
#[derive(Debug)]
pub struct Pretrained {
    pub state: TeacherStudentState,
    pub ledger: Vec<LedgerRow>,
    pub eval: Evaluation,
}

impl Pretrained {
    fn duplicate(&self) -> TeacherStudentState {
        TeacherStudentState {
            student: self.state.student.clone(),
            teacher: None,
            velocity: self.state.velocity.clone(),
            ema_momentum: self.state.ema_momentum,
            stage: self.state.stage,
            iteration: self.state.iteration,
        }
    }
}

fn should_eval(cfg: &ExperimentConfig, it: usize) -> bool {
    it + 1 == cfg.pretrain_iters || it + 1 == cfg.total_iters || (cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0)
}

fn batch_of<'a>(pool: &[&'a Scene], idx: Vec<usize>) -> Vec<&'a Scene> {
    idx.into_iter().map(|i| pool[i]).collect()
}

fn record_eval(row: &mut LedgerRow, e: &Evaluation) {
    row.teacher_ap50 = Some(e.ap.ap50);
    row.teacher_ap50_95 = Some(e.ap.ap50_95);
}

/// Supervised pre-training from a fresh initialization.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset, progress: Progress) -> Result<Pretrained> {
    let det = Detector::new(cfg.detector());
    let pcfg = cfg.pipeline();
    let labeled = data.labeled();
    let mut sampler = BatchSampler::new(labeled.len(), cfg.seed, 0);
    let mut state = TeacherStudentState::new(det.init_params(cfg.seed, true)?, cfg.ema_momentum);
    let mut ledger = Vec::with_capacity(cfg.pretrain_iters);
    let mut eval = None;
    for it in 0..cfg.pretrain_iters {
        let batch = batch_of(&labeled, sampler.batch(it as u64, cfg.labeled_batch));
        let mut row = LedgerRow::from_report(&pretrain_step(&det, &pcfg, &mut state, &batch)?);
        if should_eval(cfg, it) {
            let e = evaluate_store(&det, &state.student, &data.test, cfg)?;
            record_eval(&mut row, &e);
            progress.line(|| format!("[seed {}] pretrain {}/{} loss {:.4} AP50 {:.4} AP50:95 {:.4}", cfg.seed, it + 1, cfg.pretrain_iters, row.l_total, e.ap.ap50, e.ap.ap50_95));
            eval = Some(e);
        }
        ledger.push(row);
    }
    let eval = match eval {
        Some(e) => e,
        None => evaluate_store(&det, &state.student, &data.test, cfg)?,
    };
    Ok(Pretrained { state, ledger, eval })
}

fn cache_dir(root: &Path, key: &str) -> PathBuf {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    root.join(format!("{:016x}", h.finish()))
}

fn velocity_store(state: &TeacherStudentState) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (p, v) in state.student.iter().zip(&state.velocity) {
        s.add(p.name.clone(), Tensor::new(p.value.shape().to_vec(), v.clone())?, ParamKind::Buffer)?;
    }
    Ok(s)
}

fn velocity_from(student: &ParamStore, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
    if store.len() != student.len() {
        return Err(Error::NameMismatch(format!("{} velocity buffers for {} parameters", store.len(), student.len())));
    }
    student.iter().map(|p| Ok(store.get(&p.name)?.value.data().to_vec())).collect()
}

/// Pre-trained state for `cfg`, loaded from `root` when a checkpoint with
/// the same pre-training settings exists there and trained (then saved)
/// otherwise.
pub fn pretrain_cached(cfg: &ExperimentConfig, data: &Dataset, root: &Path, progress: Progress) -> Result<Pretrained> {
    let key = cfg.pretrain_key();
    let dir = cache_dir(root, &key);
    let key_path = dir.join("key.txt");
    if key_path.exists() {
        let stored = std::fs::read_to_string(&key_path)?;
        if stored.trim() != key {
            return Err(Error::Config {
                key: "pretrain".into(),
                msg: format!("cannot resume from {}: it was trained with `{}`, this run needs `{key}`", dir.display(), stored.trim()),
            });
        }
        let student = checkpoint::load(&dir.join("student.ckpt"))?;
        let velocity = velocity_from(&student, &checkpoint::load(&dir.join("velocity.ckpt"))?)?;
        let ledger = ledger_from_csv(&std::fs::read_to_string(dir.join("ledger.csv"))?)?;
        let mut state = TeacherStudentState::new(student, cfg.ema_momentum);
        state.velocity = velocity;
        state.iteration = cfg.pretrain_iters as u64;
        let det = Detector::new(cfg.detector());
        let eval = evaluate_store(&det, &state.student, &data.test, cfg)?;
        progress.line(|| format!("[seed {}] resumed pre-training from {}", cfg.seed, dir.display()));
        return Ok(Pretrained { state, ledger, eval });
    }
    let p = pretrain(cfg, data, progress)?;
    std::fs::create_dir_all(&dir)?;
    checkpoint::save(&p.state.student, &dir.join("student.ckpt"))?;
    checkpoint::save(&velocity_store(&p.state)?, &dir.join("velocity.ckpt"))?;
    std::fs::write(dir.join("ledger.csv"), ledger_to_csv(&p.ledger))?;
    std::fs::write(&key_path, format!("{key}\n"))?;
    Ok(p)
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub ledger: Vec<LedgerRow>,
    pub pretrain_eval: Evaluation,
    /// The teacher after mutual learning, or the pre-trained student when
    /// the schedule has no mutual stage.
    pub final_eval: Evaluation,
    pub student: ParamStore,
    pub teacher: Option<ParamStore>,
}

impl RunOutcome {
    /// Whether every box pseudo-label set was a subset of its class set.
    pub fn reg_subset_always(&self) -> bool {
        self.ledger.iter().all(|r| r.reg_subset)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            ap50: self.final_eval.ap.ap50,
            ap75: self.final_eval.ap.ap75,
            ap50_95: self.final_eval.ap.ap50_95,
            pretrain_ap50: self.pretrain_eval.ap.ap50,
            pretrain_ap75: self.pretrain_eval.ap.ap75,
            pretrain_ap50_95: self.pretrain_eval.ap.ap50_95,
            pretrain_spearman: self.pretrain_eval.correlation.as_ref().map(|c| c.spearman_rho),
            spearman: self.final_eval.correlation.as_ref().map(|c| c.spearman_rho),
            reg_subset_always: self.reg_subset_always(),
        }
    }
}

/// Mutual learning from a pre-trained state.
pub fn train_mutual(cfg: &ExperimentConfig, data: &Dataset, pre: &Pretrained, progress: Progress) -> Result<RunOutcome> {
    let det = Detector::new(cfg.detector());
    let pcfg = cfg.pipeline();
    let mut ledger = pre.ledger.clone();
    if cfg.mutual_iters() == 0 {
        return Ok(RunOutcome {
            ledger,
            pretrain_eval: pre.eval.clone(),
            final_eval: pre.eval.clone(),
            student: pre.state.student.clone(),
            teacher: None,
        });
    }
    let labeled = data.labeled();
    let unlabeled = data.unlabeled();
    let mut lsampler = BatchSampler::new(labeled.len(), cfg.seed, 0);
    let mut usampler = BatchSampler::new(unlabeled.len(), cfg.seed, 1);
    let mut state = pre.duplicate();
    state.ema_momentum = cfg.ema_momentum;
    state.begin_mutual()?;
    let mut final_eval = None;
    for it in cfg.pretrain_iters..cfg.total_iters {
        let lb = batch_of(&labeled, lsampler.batch(it as u64, cfg.labeled_batch));
        let ub = batch_of(&unlabeled, usampler.batch((it - cfg.pretrain_iters) as u64, cfg.unlabeled_batch));
        let mut row = LedgerRow::from_report(&mutual_step(&det, &pcfg, &mut state, &lb, &ub)?);
        if should_eval(cfg, it) {
            let e = evaluate_store(&det, state.teacher()?, &data.test, cfg)?;
            record_eval(&mut row, &e);
            progress.line(|| {
                format!(
                    "[seed {}] mutual {}/{} loss {:.4} labels {}/{} teacher AP50 {:.4} AP50:95 {:.4}",
                    cfg.seed,
                    it + 1,
                    cfg.total_iters,
                    row.l_total,
                    row.n_reg_labels,
                    row.n_cls_labels,
                    e.ap.ap50,
                    e.ap.ap50_95
                )
            });
            final_eval = Some(e);
        }
        ledger.push(row);
    }
    let teacher = state.teacher()?.clone();
    let final_eval = match final_eval {
        Some(e) => e,
        None => evaluate_store(&det, &teacher, &data.test, cfg)?,
    };
    Ok(RunOutcome { ledger, pretrain_eval: pre.eval.clone(), final_eval, student: state.student, teacher: Some(teacher) })
}

/// Writes config, ledger, checkpoints, AP and correlation reports, the
/// detection dump and a summary into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    std::fs::write(dir.join("ledger.csv"), ledger_to_csv(&out.ledger))?;
    checkpoint::save(&out.student, &dir.join("student.ckpt"))?;
    if let Some(t) = &out.teacher {
        checkpoint::save(t, &dir.join("teacher.ckpt"))?;
    }
    std::fs::write(dir.join("ap_report.csv"), out.final_eval.ap.to_csv())?;
    match &out.final_eval.correlation {
        Some(c) => std::fs::write(dir.join("correlation.csv"), c.to_csv())?,
        None => std::fs::write(dir.join("correlation.csv"), "# insufficient samples\n")?,
    }
    write_detections(&dir.join("detections.tsv"), &out.final_eval.records)?;
    std::fs::write(dir.join("summary.txt"), out.summary().to_text())?;
    Ok(())
}

/// Full run of one configuration: data, pre-training (through the cache
/// under `cache_root`, or `<output.dir>/pretrain`), mutual learning and
/// artifacts in `output.dir`.
pub fn run(cfg: &ExperimentConfig, cache_root: Option<&Path>, progress: Progress) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let default_cache = cfg.output_dir.join("pretrain");
    let pre = pretrain_cached(cfg, &data, cache_root.unwrap_or(&default_cache), progress)?;
    let out = train_mutual(cfg, &data, &pre, progress)?;
    write_run(&cfg.output_dir, cfg, &out)?;
    Ok(out)
}
