//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! The experimental criteria (5 to 9) train 5 seeds at full scale, which
//! takes on the order of two hours on one CPU core. `SSOD_ACCEPTANCE=quick`
//! runs them on a toy schedule instead; their verdicts are then meaningless
//! but every code path is exercised. Deterministic criteria fail the test;
//! experimental ones are reported only.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssod_core::autodiff::{finite_difference_check, ParamKind, ParamStore, Tape, Tensor, FD_STEP};
use ssod_core::boxes::BBox;
use ssod_core::detector::{nms, teacher_from_student, Detector, DetectorConfig};
use ssod_core::experiment::{
    ablation_cells, pretrain_cached, run, run_cells, treg_cells, treg_sweep_csv, Dataset, ExperimentConfig, GridReport, Progress,
};
use ssod_core::losses::{
    contrastive_loss, cross_entropy, focal_loss, ocl_loss, pairing_weights, smooth_l1, uncertainty_reg_loss, RoiEmbeddingBatch,
};
use ssod_core::metrics::{average_precision, ScoredBox};
use ssod_core::pipeline::ema_update;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 1000;
const SPEARMAN_MAX: f64 = -0.3;
const SSOD_GAIN: f64 = 0.02;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREG: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
const SUITE_SECONDS: f64 = 60.0;
const SEED_SECONDS: f64 = 15.0 * 60.0;

struct Verdict {
    id: usize,
    pass: bool,
    hard: bool,
    detail: String,
}

fn line(v: &Verdict) -> String {
    format!("criterion {:>2}: {} {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail)
}

/// Writes past the test harness's output capture so results show in a
/// plain `cargo test` run.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", text.trim_end());
    let _ = out.flush();
}

fn record(out: &mut Vec<Verdict>, id: usize, pass: bool, hard: bool, detail: String) {
    let v = Verdict { id, pass, hard, detail };
    emit(&line(&v));
    out.push(v);
}

// ---------- 1: gradients ----------

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Values bounded away from the smooth-L1 kink at |x| = 1.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..0.8) + if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn gradient_suite() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut check = |store: &mut ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> ssod_core::Result<ssod_core::autodiff::NodeId>| {
        let r = finite_difference_check(store, f, FD_STEP, GRAD_TOL).unwrap();
        worst = worst.max(r.max_rel_error());
        checks += 1;
    };
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let (b, k) = (rng.random_range(2..6), rng.random_range(2..6));
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut s = ParamStore::new();
        s.add("logits", random_matrix(&mut rng, b, k, 2.0), ParamKind::Trainable).unwrap();
        check(&mut s, &|t, st| {
            let l = t.param(st, "logits")?;
            cross_entropy(t, l, &targets)
        });
        let (gamma, alpha) = (rng.random_range(0.5..3.0), rng.random_range(0.1..1.0));
        check(&mut s, &|t, st| {
            let l = t.param(st, "logits")?;
            focal_loss(t, l, &targets, gamma, alpha)
        });

        let mut s = ParamStore::new();
        s.add("pred", Tensor::new(vec![b, 4], off_kink(&mut rng, b * 4)).unwrap(), ParamKind::Trainable).unwrap();
        s.add("log_var", random_matrix(&mut rng, b, 4, 2.0), ParamKind::Trainable).unwrap();
        let zeros = Tensor::zeros(&[b, 4]);
        check(&mut s, &|t, st| {
            let p = t.param(st, "pred")?;
            let z = t.constant(zeros.clone());
            smooth_l1(t, p, z, 1.0)
        });
        check(&mut s, &|t, st| {
            let p = t.param(st, "pred")?;
            let a = t.param(st, "log_var")?;
            let z = t.constant(zeros.clone());
            uncertainty_reg_loss(t, p, z, a, 0.25, 1.0)
        });

        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pairing = pairing_weights(&scores, &classes, 0.7);
        let tau = rng.random_range(0.1..1.0);
        let (t1, t2) = (random_matrix(&mut rng, n, d, 1.0), random_matrix(&mut rng, n, d, 1.0));
        let mut s = ParamStore::new();
        s.add("s1", random_matrix(&mut rng, n, d, 1.0), ParamKind::Trainable).unwrap();
        s.add("s2", random_matrix(&mut rng, n, d, 1.0), ParamKind::Trainable).unwrap();
        let view = |t: &mut Tape, st: &ParamStore, name: &str, teacher: &Tensor| -> ssod_core::Result<RoiEmbeddingBatch> {
            let raw = t.param(st, name)?;
            let tc = t.constant(teacher.clone());
            Ok(RoiEmbeddingBatch { student: t.l2_normalize(raw)?, teacher: t.l2_normalize(tc)? })
        };
        check(&mut s, &|t, st| {
            let v = view(t, st, "s1", &t1)?;
            Ok(contrastive_loss(t, &v, &pairing, tau)?.loss)
        });
        check(&mut s, &|t, st| {
            let v1 = view(t, st, "s1", &t1)?;
            let v2 = view(t, st, "s2", &t2)?;
            Ok(ocl_loss(t, &v1, &v2, &pairing, tau)?.loss)
        });
    }
    (worst <= GRAD_TOL, format!("{checks} checks over {GRAD_SEEDS} seeds, max relative error {worst:.2e} (tol {GRAD_TOL:e})"))
}

// ---------- 2: oracles ----------

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn contrastive_scalar(s: &[Vec<f64>], t: &[Vec<f64>], w: &dyn Fn(usize, usize) -> f64, tau: f64) -> f64 {
    let n = s.len();
    let sim = |a: usize, b: usize| s[a].iter().zip(&t[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for l in 0..n {
            if l != i {
                denom += sim(i, l).exp();
            }
        }
        let mut positives = 0.0;
        let mut acc = 0.0;
        for m in 0..n {
            if w(i, m) > 0.0 {
                positives += 1.0;
                acc += w(i, m) * (sim(i, m).exp() / denom).ln();
            }
        }
        total += acc / positives;
    }
    -total / n as f64
}

fn contrastive_oracle_check(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..8);
        let s = unit_rows(rng, n, d);
        let t = unit_rows(rng, n, d);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..=10) as f64) / 10.0).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let tau = rng.random_range(0.05..1.0);
        let p = pairing_weights(&scores, &classes, 0.7);
        let mut tape = Tape::new();
        let flat = |rows: &[Vec<f64>]| Tensor::new(vec![n, d], rows.concat()).unwrap();
        let sn = tape.constant(flat(&s));
        let tn = tape.constant(flat(&t));
        let loss = contrastive_loss(&mut tape, &RoiEmbeddingBatch { student: sn, teacher: tn }, &p, tau).unwrap().loss;
        let got = tape.item(loss);
        let want = contrastive_scalar(&s, &t, &|a, b| p.weight(a, b), tau);
        worst = worst.max((got - want).abs());
    }
    worst
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..12) as f64;
    let y = rng.random_range(0..12) as f64;
    BBox::new(x, y, x + rng.random_range(2..8) as f64, y + rng.random_range(2..8) as f64)
}

/// `i` precedes `j` when it has the higher score, or the lower index on ties.
fn precedes(scores: &[f64], i: usize, j: usize) -> bool {
    scores[i] > scores[j] || (scores[i] == scores[j] && i < j)
}

/// The unique kept set: `i` is kept iff no kept box preceding it overlaps it
/// above the threshold. Found by trying every subset.
fn nms_brute_force(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && kept(j) && precedes(scores, j, i) && overlap(&boxes[i], &boxes[j]) > t);
            kept(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "the suppression fixed point is unique");
    let mut out: Vec<usize> = (0..n).filter(|&i| found[0] & (1 << i) != 0).collect();
    out.sort_by(|&a, &b| if precedes(scores, a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    out
}

fn nms_oracle_check(rng: &mut ChaCha8Rng) -> usize {
    let mut mismatches = 0;
    for _ in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..=9);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
        let t = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        if nms(&boxes, &scores, t) != nms_brute_force(&boxes, &scores, t) {
            mismatches += 1;
        }
    }
    mismatches
}

/// AP straight from the definition: greedy matching in score order, then
/// for each of 101 recall levels the best precision at any rank reaching it.
fn ap_brute_force(dets: &[ScoredBox], gts: &[ScoredBox], t: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            if precedes(&scores, order[b], order[a]) {
                order.swap(a, b);
            }
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut curve = Vec::new();
    let mut hits = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let mut choice: Option<usize> = None;
        for j in 0..gts.len() {
            if taken[j] || gts[j].image_id != dets[i].image_id {
                continue;
            }
            let v = overlap(&dets[i].bbox, &gts[j].bbox);
            if v >= t && choice.map_or(true, |c| v > overlap(&dets[i].bbox, &gts[c].bbox)) {
                choice = Some(j);
            }
        }
        if let Some(j) = choice {
            taken[j] = true;
            hits += 1;
        }
        curve.push((hits as f64 / gts.len() as f64, hits as f64 / (rank + 1) as f64));
    }
    let mut sum = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        sum += curve.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn ap_oracle_check(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let images = rng.random_range(1..4);
        let gts: Vec<ScoredBox> =
            (0..rng.random_range(0..7)).map(|_| ScoredBox { image_id: rng.random_range(0..images), score: 1.0, bbox: random_box(rng) }).collect();
        let dets: Vec<ScoredBox> = (0..rng.random_range(0..10))
            .map(|_| ScoredBox { image_id: rng.random_range(0..images), score: (rng.random_range(0..8) as f64) / 7.0, bbox: random_box(rng) })
            .collect();
        let t = [0.5, 0.75, 0.9][rng.random_range(0..3)];
        match (average_precision(&dets, &gts, t), ap_brute_force(&dets, &gts, t)) {
            (None, None) => {}
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => worst = f64::INFINITY,
        }
    }
    worst
}

// ---------- 3: pairing ----------

fn pairing_enumeration() -> (bool, String) {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let thresholds = [0.3, 0.5, 0.7, 0.9];
    let mut cases = 0usize;
    let mut failures = Vec::new();
    for n in 1..=4usize {
        let score_combos = grid.len().pow(n as u32);
        let class_combos = 3usize.pow(n as u32);
        for sc in 0..score_combos {
            let scores: Vec<f64> = (0..n).map(|i| grid[(sc / grid.len().pow(i as u32)) % grid.len()]).collect();
            for cc in 0..class_combos {
                let classes: Vec<usize> = (0..n).map(|i| (cc / 3usize.pow(i as u32)) % 3).collect();
                let mats: Vec<_> = thresholds.iter().map(|&t| pairing_weights(&scores, &classes, t)).collect();
                for (ti, (p, &t)) in mats.iter().zip(&thresholds).enumerate() {
                    cases += 1;
                    for a in 0..n {
                        if p.weight(a, a) != 1.0 {
                            failures.push(format!("diagonal {scores:?} {classes:?} t={t}"));
                        }
                        for b in 0..n {
                            let w = p.weight(a, b);
                            if w != p.weight(b, a) {
                                failures.push(format!("symmetry {scores:?} {classes:?} t={t}"));
                            }
                            if a == b {
                                continue;
                            }
                            let expect = if classes[a] != classes[b] {
                                0.0
                            } else if scores[a] > t && scores[b] > t {
                                scores[a] * scores[b]
                            } else {
                                0.0
                            };
                            if w != expect {
                                failures.push(format!("case {scores:?} {classes:?} t={t} ({a},{b}) {w} != {expect}"));
                            }
                            if ti > 0 && w > mats[ti - 1].weight(a, b) {
                                failures.push(format!("monotonicity {scores:?} {classes:?} t={t}"));
                            }
                        }
                        let positives = (0..n).filter(|&b| p.weight(a, b) > 0.0).count();
                        if p.positive_counts()[a] != positives {
                            failures.push(format!("count {scores:?} {classes:?} t={t}"));
                        }
                    }
                }
            }
        }
    }
    let detail = match failures.first() {
        None => format!("{cases} matrices (N <= 4, scores on a 0.1 grid, 3 classes, t in {thresholds:?})"),
        Some(f) => format!("{} violations, first: {f}", failures.len()),
    };
    (failures.is_empty(), detail)
}

// ---------- 10: EMA ----------

fn ema_exactness() -> (bool, String) {
    let det = Detector::new(DetectorConfig::default());
    let student = det.init_params(1, true).unwrap();
    let base = teacher_from_student(&det.init_params(2, true).unwrap()).unwrap();
    let mut worst = 0.0f64;
    let mut exact = true;
    let mut entries = 0usize;
    for m in [0.0, 0.9996, 1.0] {
        let mut teacher = teacher_from_student(&base).unwrap();
        ema_update(&mut teacher, &student, m).unwrap();
        for (t, prev) in teacher.iter().zip(base.iter()) {
            let s = student.get(&t.name).unwrap();
            for ((&got, &tp), &sv) in t.value.data().iter().zip(prev.value.data()).zip(s.value.data()) {
                entries += 1;
                let want = m * tp + (1.0 - m) * sv;
                if m == 0.0 && got.to_bits() != sv.to_bits() || m == 1.0 && got.to_bits() != tp.to_bits() {
                    exact = false;
                }
                let scale = tp.abs().max(sv.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max((got - want).abs() / scale);
            }
        }
    }
    let pass = exact && worst <= 4.0 * f64::EPSILON;
    (pass, format!("{entries} entries, m=0 copies and m=1 keeps bit-exactly: {exact}, max relative deviation {worst:.1e}"))
}

// ---------- experiments ----------

fn quick() -> bool {
    std::env::var("SSOD_ACCEPTANCE").is_ok_and(|v| v == "quick")
}

fn base_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    if quick() {
        c.apply([
            "dataset.num_scenes=60",
            "dataset.test_scenes=30",
            "dataset.labeled_fraction=0.5",
            "schedule.pretrain_iters=60",
            "schedule.total_iters=80",
            "schedule.labeled_batch=4",
            "schedule.unlabeled_batch=4",
            "eval.interval=0",
        ])
        .unwrap();
    }
    c.output_dir = out.to_path_buf();
    c
}

fn determinism(root: &Path) -> (bool, bool, String) {
    let mut c = ExperimentConfig::default();
    c.apply([
        "seed=3",
        "dataset.num_scenes=40",
        "dataset.test_scenes=10",
        "dataset.labeled_fraction=0.5",
        "schedule.pretrain_iters=20",
        "schedule.total_iters=30",
        "schedule.labeled_batch=4",
        "schedule.unlabeled_batch=4",
        "thresholds.t_cls=0.3",
        "eval.interval=10",
    ])
    .unwrap();
    let mut texts = Vec::new();
    let mut subset = true;
    for k in 0..2 {
        let dir = root.join(format!("determinism-{k}"));
        let _ = std::fs::remove_dir_all(&dir);
        c.output_dir = dir.clone();
        let out = run(&c, None, Progress(false)).unwrap();
        subset &= out.reg_subset_always();
        texts.push((std::fs::read(dir.join("ledger.csv")).unwrap(), std::fs::read(dir.join("teacher.ckpt")).unwrap()));
    }
    let same = texts[0] == texts[1];
    (same, subset, format!("two fresh runs, seed 3, {} ledger bytes, ledgers and teacher checkpoints identical: {same}", texts[0].0.len()))
}

fn fmt_stats(report: &GridReport, cell: &str, metric: fn(&ssod_core::experiment::Summary) -> f64) -> String {
    match report.stats(cell, metric) {
        Some(s) => format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std),
        None => "NA".into(),
    }
}

fn mean(report: &GridReport, cell: &str, metric: fn(&ssod_core::experiment::Summary) -> f64) -> f64 {
    report.stats(cell, metric).map_or(f64::NAN, |s| s.mean)
}

#[test]
fn acceptance() {
    let root: PathBuf = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).unwrap();
    let mut verdicts = Vec::new();

    let start = Instant::now();
    let (ok, detail) = gradient_suite();
    let secs = start.elapsed().as_secs_f64();
    record(&mut verdicts, 1, ok && secs < SUITE_SECONDS, true, format!("{detail}; {secs:.1}s"));

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let c = contrastive_oracle_check(&mut rng);
    let nms_bad = nms_oracle_check(&mut rng);
    let ap = ap_oracle_check(&mut rng);
    let secs = start.elapsed().as_secs_f64();
    record(
        &mut verdicts,
        2,
        c <= ORACLE_TOL && nms_bad == 0 && ap <= ORACLE_TOL && secs < SUITE_SECONDS,
        true,
        format!(
            "contrastive max |diff| {c:.1e} (tol {ORACLE_TOL:e}), NMS mismatches {nms_bad}/{ORACLE_INSTANCES}, AP max |diff| {ap:.1e} over {ORACLE_INSTANCES} instances; {secs:.1}s"
        ),
    );

    let (ok, detail) = pairing_enumeration();
    record(&mut verdicts, 3, ok, true, detail);

    let grid_dir = root.join(if quick() { "grid-quick" } else { "grid" });
    let base = base_config(&grid_dir);
    let mut pretrain_secs = Vec::new();
    for &seed in &SEEDS {
        let mut c = base.clone();
        c.seed = seed;
        let data = Dataset::generate(&c).unwrap();
        let t = Instant::now();
        pretrain_cached(&c, &data, &grid_dir.join("pretrain"), Progress(true)).unwrap();
        pretrain_secs.push(t.elapsed().as_secs_f64());
    }
    let mut cells = ablation_cells();
    let extra: Vec<_> = treg_cells(&TREG).into_iter().filter(|c| !c.name.ends_with("=0.5")).collect();
    cells.extend(extra);
    let report = run_cells(&base, &cells, &SEEDS, &grid_dir, Progress(true)).unwrap();
    let sweep_cells: Vec<(f64, String)> =
        TREG.iter().map(|&t| (t, if t == 0.5 { "ocl+rupl".to_string() } else { format!("t_reg={t}") })).collect();
    let sweep = treg_sweep_csv(&report, &sweep_cells);
    std::fs::write(grid_dir.join("treg_sweep.csv"), &sweep).unwrap();
    emit(&report.grid_csv());
    emit(&sweep);

    let failures = report.failures();
    let all_ok = failures.is_empty();
    let (det_same, det_subset, det_detail) = determinism(&root);
    let subset = report.results.iter().all(|r| r.outcome.as_ref().is_ok_and(|s| s.reg_subset_always)) && det_subset;
    record(
        &mut verdicts,
        4,
        subset && all_ok,
        true,
        format!("{} runs, every ledger row has reg_set within cls_set: {subset}; failed runs: {}", report.results.len() + 2, failures.len()),
    );

    let full: Vec<_> = report.results.iter().filter(|r| r.cell == "ocl+rupl").collect();
    let rhos: Vec<f64> = full.iter().filter_map(|r| r.outcome.as_ref().ok().and_then(|s| s.spearman)).collect();
    let rho = rhos.iter().sum::<f64>() / rhos.len().max(1) as f64;
    let seed_secs: Vec<f64> = SEEDS
        .iter()
        .zip(&pretrain_secs)
        .map(|(&s, p)| p + full.iter().find(|r| r.seed == s).map_or(0.0, |r| r.seconds))
        .collect();
    let slowest = seed_secs.iter().cloned().fold(0.0, f64::max);
    let pre_rhos: Vec<f64> = full.iter().filter_map(|r| r.outcome.as_ref().ok().and_then(|s| s.pretrain_spearman)).collect();
    record(
        &mut verdicts,
        5,
        rhos.len() == SEEDS.len() && rho <= SPEARMAN_MAX && slowest <= SEED_SECONDS,
        false,
        format!(
            "mean Spearman(sigma, IoU) {rho:.3} over {} seeds (per seed {:?}; after pre-training only {:?}); slowest seed {:.0}s",
            rhos.len(),
            rhos.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            pre_rhos.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            slowest
        ),
    );

    let pre = report.pretrain_stats(|s| s.pretrain_ap50_95).map_or(f64::NAN, |s| s.mean);
    let fullm = mean(&report, "ocl+rupl", |s| s.ap50_95);
    let gain = fullm - pre;
    record(
        &mut verdicts,
        6,
        gain >= SSOD_GAIN,
        false,
        format!("AP50:95 pretrain-only {:.2} -> mutual (ocl+rupl) {:.2}, gain {:+.2} points (need >= {:+.1})", 100.0 * pre, 100.0 * fullm, 100.0 * gain, 100.0 * SSOD_GAIN),
    );

    let [b, o, r, f] = ["baseline", "ocl", "rupl", "ocl+rupl"].map(|c| mean(&report, c, |s| s.ap50_95));
    let ordered = f >= o.max(r) && o.max(r) >= b && f - b > 0.0;
    record(
        &mut verdicts,
        7,
        ordered,
        false,
        format!(
            "(soft) AP50:95 baseline {}, ocl {}, rupl {}, ocl+rupl {}; combined - baseline {:+.2} points{}",
            fmt_stats(&report, "baseline", |s| s.ap50_95),
            fmt_stats(&report, "ocl", |s| s.ap50_95),
            fmt_stats(&report, "rupl", |s| s.ap50_95),
            fmt_stats(&report, "ocl+rupl", |s| s.ap50_95),
            100.0 * (f - b),
            if ordered { "" } else { "; FLAG: ordering not met, see mean±std" }
        ),
    );

    let (b75, r75) = (mean(&report, "baseline", |s| s.ap75), mean(&report, "rupl", |s| s.ap75));
    record(
        &mut verdicts,
        8,
        r75 > b75,
        false,
        format!(
            "AP75 baseline {} vs rupl {} ({:+.2} points); AP50 baseline {} vs rupl {} (reported only)",
            fmt_stats(&report, "baseline", |s| s.ap75),
            fmt_stats(&report, "rupl", |s| s.ap75),
            100.0 * (r75 - b75),
            fmt_stats(&report, "baseline", |s| s.ap50),
            fmt_stats(&report, "rupl", |s| s.ap50)
        ),
    );

    let curve: Vec<f64> = sweep_cells.iter().map(|(_, c)| mean(&report, c, |s| s.ap50_95)).collect();
    let peak = (0..curve.len()).fold(0, |best, i| if curve[i] > curve[best] { i } else { best });
    let unimodal = peak > 0
        && peak < curve.len() - 1
        && curve[..=peak].windows(2).all(|w| w[0] <= w[1])
        && curve[peak..].windows(2).all(|w| w[0] >= w[1]);
    record(
        &mut verdicts,
        9,
        unimodal,
        false,
        format!(
            "mean AP50:95 at t_reg {:?}: {:?}; peak at {}",
            TREG,
            curve.iter().map(|v| (v * 10000.0).round() / 100.0).collect::<Vec<_>>(),
            TREG[peak]
        ),
    );

    let (ok, detail) = ema_exactness();
    record(&mut verdicts, 10, ok, true, detail);

    record(&mut verdicts, 11, det_same, true, det_detail);

    let summary: String = verdicts.iter().map(|v| line(v) + "\n").collect();
    std::fs::write(root.join(if quick() { "acceptance-quick.txt" } else { "acceptance.txt" }), &summary).unwrap();
    emit(&format!("\n{summary}"));
    let hard_failures: Vec<usize> = verdicts.iter().filter(|v| v.hard && !v.pass).map(|v| v.id).collect();
    assert!(hard_failures.is_empty(), "deterministic criteria failed: {hard_failures:?}");
}
