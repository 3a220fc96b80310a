use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_check, ParamKind, ParamStore, FD_STEP};

fn eval(f: impl FnOnce(&mut Tape) -> Result<NodeId>) -> f64 {
    let mut t = Tape::new();
    let out = f(&mut t).unwrap();
    t.item(out)
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    mat(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn flatten(rows: &[Vec<f64>]) -> Tensor {
    mat(rows.len(), rows[0].len(), rows.concat())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------- scalar-loop oracles, independent of the tape ----------

/// Per-sample softmax cross-entropy.
fn ce_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / z).ln();
    }
    total / logits.len() as f64
}

fn focal_oracle(logits: &[Vec<f64>], targets: &[usize], gamma: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let p = row[t].exp() / z;
        total += -alpha * (1.0 - p).powf(gamma) * p.ln();
    }
    total / logits.len() as f64
}

/// Direct evaluation of the object-wise contrastive loss of one view.
fn contrastive_oracle(s: &[Vec<f64>], t: &[Vec<f64>], w: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let count = w[i].iter().filter(|&&x| x > 0.0).count() as f64;
        let denom: f64 = (0..n)
            .filter(|&l| l != i)
            .map(|l| (dot(&s[i], &t[l]) / tau).exp())
            .sum();
        let mut row = 0.0;
        for m in 0..n {
            if w[i][m] > 0.0 {
                row += w[i][m] * ((dot(&s[i], &t[m]) / tau).exp() / denom).ln();
            }
        }
        total += row / count;
    }
    -total / n as f64
}

/// InfoNCE with diagonal positives and the positive excluded from the
/// normalizer, written as positive logit minus log-sum-exp of negatives.
fn infonce_oracle(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let negs: Vec<f64> = (0..n).filter(|&l| l != i).map(|l| dot(&s[i], &t[l]) / tau).collect();
        let m = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + negs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - dot(&s[i], &t[i]) / tau;
    }
    total / n as f64
}

fn weights_rows(p: &PairingMatrix) -> Vec<Vec<f64>> {
    p.weights().chunks(p.size()).map(|r| r.to_vec()).collect()
}

fn contrastive_value(s: &[Vec<f64>], t: &[Vec<f64>], pairing: &PairingMatrix, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let sn = tape.constant(flatten(s));
    let tn = tape.constant(flatten(t));
    let out = contrastive_loss(&mut tape, &RoiEmbeddingBatch { student: sn, teacher: tn }, pairing, tau).unwrap();
    tape.item(out.loss)
}

// ---------- cross-entropy / focal ----------

#[test]
fn cross_entropy_examples() {
    let v = eval(|t| {
        let l = t.constant(mat(1, 2, vec![0.0, 0.0]));
        cross_entropy(t, l, &[0])
    });
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);

    let v = eval(|t| {
        let l = t.constant(mat(1, 2, vec![10.0, -10.0]));
        cross_entropy(t, l, &[0])
    });
    let expected = (-20.0f64).exp().ln_1p();
    assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
    assert!((v - 2.06e-9).abs() < 1e-11);

    let mut last = f64::INFINITY;
    for gap in [1.0, 5.0, 10.0, 20.0, 40.0] {
        let v = eval(|t| {
            let l = t.constant(mat(1, 2, vec![gap, 0.0]));
            cross_entropy(t, l, &[0])
        });
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-15);
}

#[test]
fn cross_entropy_rejects_out_of_range_targets() {
    let mut t = Tape::new();
    let l = t.constant(mat(2, 3, vec![0.0; 6]));
    assert!(cross_entropy(&mut t, l, &[0, 3]).is_err());
    assert!(focal_loss(&mut t, l, &[5, 0], 2.0, 0.25).is_err());
}

#[test]
fn focal_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let logits = random_matrix(&mut rng, 6, 5, 3.0);
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let ce = eval(|t| {
            let l = t.constant(logits.clone());
            cross_entropy(t, l, &targets)
        });
        let fl = eval(|t| {
            let l = t.constant(logits.clone());
            focal_loss(t, l, &targets, 0.0, 1.0)
        });
        assert!((ce - fl).abs() <= 1e-12);

        let rows: Vec<Vec<f64>> = logits.data().chunks(5).map(|r| r.to_vec()).collect();
        let fl2 = eval(|t| {
            let l = t.constant(logits.clone());
            focal_loss(t, l, &targets, 2.0, 0.25)
        });
        assert!((fl2 - focal_oracle(&rows, &targets, 2.0, 0.25)).abs() <= 1e-10);
        assert!((ce - ce_oracle(&rows, &targets)).abs() <= 1e-10);
    }

    // p_t = 0.5 with two tied logits
    let v = eval(|t| {
        let l = t.constant(mat(1, 2, vec![0.3, 0.3]));
        focal_loss(t, l, &[1], 2.0, 1.0)
    });
    assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v - 0.173287).abs() < 1e-6);
}

// ---------- smooth-L1 / uncertainty regression ----------

fn sl1(x: f64) -> f64 {
    eval(|t| {
        let p = t.constant(Tensor::vector(vec![x]));
        let z = t.constant(Tensor::vector(vec![0.0]));
        smooth_l1(t, p, z, 1.0)
    })
}

#[test]
fn smooth_l1_examples() {
    assert_eq!(sl1(0.5), 0.125);
    assert_eq!(sl1(2.0), 1.5);
    assert_eq!(sl1(1.0), 0.5);
    assert_eq!(sl1(-2.0), 1.5);
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![1.0]));
    assert!(smooth_l1(&mut t, a, b, 1.0).is_err());
}

fn unc_loss(pred: &[f64], target: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    let b = pred.len() / 4;
    eval(|t| {
        let p = t.constant(mat(b, 4, pred.to_vec()));
        let g = t.constant(mat(b, 4, target.to_vec()));
        let a = t.constant(mat(b, 4, alpha.to_vec()));
        uncertainty_reg_loss(t, p, g, a, lambda, 1.0)
    })
}

#[test]
fn uncertainty_loss_examples() {
    let x = [0.1, -0.3, 0.7, 2.0];
    assert_eq!(unc_loss(&x, &x, &[0.0; 4], 0.25), 0.0);
    assert_eq!(unc_loss(&[0.5; 4], &[0.0; 4], &[0.0; 4], 0.25), 0.125);
    // clamp applies to out-of-range log-variances
    let clamped = unc_loss(&[0.5; 4], &[0.0; 4], &[25.0; 4], 0.25);
    let at_bound = unc_loss(&[0.5; 4], &[0.0; 4], &[10.0; 4], 0.25);
    assert_eq!(clamped, at_bound);
}

/// Golden-section minimizer on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    for _ in 0..iters {
        if f(c) < f(d) {
            hi = d;
        } else {
            lo = c;
        }
        c = hi - g * (hi - lo);
        d = lo + g * (hi - lo);
    }
    0.5 * (lo + hi)
}

#[test]
fn uncertainty_loss_minimizer_matches_closed_form() {
    let lambda = 0.25;
    for r in [0.2, 0.5, 0.9] {
        let f = |a: f64| unc_loss(&[r, r, r, r], &[0.0; 4], &[a; 4], lambda);
        let numeric = golden_section(f, -10.0, 10.0, 80);
        let closed = (0.5 * r * r / lambda).ln();
        assert!((numeric - closed).abs() < 1e-3, "r={r}: {numeric} vs {closed}");
    }
}

proptest! {
    #[test]
    fn uncertainty_loss_with_zero_log_var_is_smooth_l1(
        pred in prop::collection::vec(-3.0f64..3.0, 8),
        target in prop::collection::vec(-3.0f64..3.0, 8),
        lambda in 0.0f64..2.0,
    ) {
        let u = unc_loss(&pred, &target, &[0.0; 8], lambda);
        let s = eval(|t| {
            let p = t.constant(mat(2, 4, pred.clone()));
            let g = t.constant(mat(2, 4, target.clone()));
            smooth_l1(t, p, g, 1.0)
        });
        prop_assert_eq!(u, s);
    }
}

// ---------- pairing ----------

#[test]
fn pairing_examples() {
    let p = pairing_weights(&[0.8, 0.9], &[2, 2], 0.7);
    assert_eq!(p.weight(0, 0), 1.0);
    assert_eq!(p.weight(1, 1), 1.0);
    assert!((p.weight(0, 1) - 0.72).abs() < 1e-15);
    assert_eq!(p.positive_counts(), &[2, 2]);

    let p = pairing_weights(&[0.8, 0.6], &[2, 2], 0.7);
    assert_eq!(p.weight(0, 1), 0.0);
    assert_eq!(p.positive_counts(), &[1, 1]);

    let p = pairing_weights(&[0.95, 0.9], &[1, 2], 0.7);
    assert_eq!(p.weight(0, 1), 0.0);
}

proptest! {
    #[test]
    fn pairing_invariants(
        objs in prop::collection::vec((0.0f64..=1.0, 0usize..3), 1..10),
        t1 in 0.0f64..1.0,
        dt in 0.0f64..0.5,
    ) {
        let scores: Vec<f64> = objs.iter().map(|o| o.0).collect();
        let classes: Vec<usize> = objs.iter().map(|o| o.1).collect();
        let p = pairing_weights(&scores, &classes, t1);
        let q = pairing_weights(&scores, &classes, t1 + dt);
        let n = scores.len();
        for i in 0..n {
            prop_assert_eq!(p.weight(i, i), 1.0);
            for j in 0..n {
                prop_assert_eq!(p.weight(i, j), p.weight(j, i));
                prop_assert!((0.0..=1.0).contains(&p.weight(i, j)));
                prop_assert!(q.weight(i, j) <= p.weight(i, j));
            }
            let count = (0..n).filter(|&j| p.weight(i, j) > 0.0).count();
            prop_assert_eq!(p.positive_counts()[i], count);
        }
    }
}

// ---------- contrastive ----------

#[test]
fn two_orthogonal_objects_with_identity_pairing() {
    let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let tau = 0.07;
    let v = contrastive_value(&z, &z, &PairingMatrix::identity(2), tau);
    // each row: log(exp(1/tau) / exp(0/tau)) = 1/tau
    let oracle = contrastive_oracle(&z, &z, &weights_rows(&PairingMatrix::identity(2)), tau);
    assert!((v - oracle).abs() < 1e-12);
    assert!((v + 1.0 / tau).abs() < 1e-12);
    assert!((v + 14.285714285714286).abs() < 1e-9);
}

#[test]
fn identity_pairing_reduces_to_infonce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 2..=8 {
        let z = unit_rows(&mut rng, n, 6);
        let t = unit_rows(&mut rng, n, 6);
        for tau in [0.07, 0.5] {
            let ident = PairingMatrix::identity(n);
            let v = contrastive_value(&z, &z, &ident, tau);
            assert!((v - infonce_oracle(&z, &z, tau)).abs() <= 1e-10);
            let v = contrastive_value(&z, &t, &ident, tau);
            assert!((v - infonce_oracle(&z, &t, tau)).abs() <= 1e-10);
        }
    }
}

#[test]
fn contrastive_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let s = unit_rows(&mut rng, n, 5);
        let t = unit_rows(&mut rng, n, 5);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let p = pairing_weights(&scores, &classes, 0.5);
        let v = contrastive_value(&s, &t, &p, 0.07);
        let o = contrastive_oracle(&s, &t, &weights_rows(&p), 0.07);
        assert!((v - o).abs() <= 1e-10, "{v} vs {o}");
    }
}

#[test]
fn contrastive_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let n = rng.random_range(2..=7);
        let s = unit_rows(&mut rng, n, 4);
        let t = unit_rows(&mut rng, n, 4);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let ps: Vec<_> = perm.iter().map(|&i| s[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| t[i].clone()).collect();
        let psc: Vec<_> = perm.iter().map(|&i| scores[i]).collect();
        let pcl: Vec<_> = perm.iter().map(|&i| classes[i]).collect();
        let a = contrastive_value(&s, &t, &pairing_weights(&scores, &classes, 0.7), 0.1);
        let b = contrastive_value(&ps, &pt, &pairing_weights(&psc, &pcl, 0.7), 0.1);
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn contrastive_degenerate_and_invalid_batches() {
    let mut tape = Tape::new();
    let z = tape.constant(mat(1, 2, vec![0.6, 0.8]));
    let out = contrastive_loss(&mut tape, &RoiEmbeddingBatch { student: z, teacher: z }, &PairingMatrix::identity(1), 0.07).unwrap();
    assert!(out.degenerate);
    assert_eq!(tape.item(out.loss), 0.0);

    let bad = tape.constant(mat(2, 2, vec![1.0, 1.0, 0.0, 1.0]));
    let res = contrastive_loss(&mut tape, &RoiEmbeddingBatch { student: bad, teacher: bad }, &PairingMatrix::identity(2), 0.07);
    assert!(res.is_err());

    let ok = tape.constant(mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let res = contrastive_loss(&mut tape, &RoiEmbeddingBatch { student: ok, teacher: ok }, &PairingMatrix::identity(3), 0.07);
    assert!(res.is_err());
    let res = contrastive_loss(&mut tape, &RoiEmbeddingBatch { student: ok, teacher: ok }, &PairingMatrix::identity(2), 0.0);
    assert!(res.is_err());
}

fn ocl_value(v1: (&[Vec<f64>], &[Vec<f64>]), v2: (&[Vec<f64>], &[Vec<f64>]), p: &PairingMatrix, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let a = RoiEmbeddingBatch {
        student: tape.constant(flatten(v1.0)),
        teacher: tape.constant(flatten(v1.1)),
    };
    let b = RoiEmbeddingBatch {
        student: tape.constant(flatten(v2.0)),
        teacher: tape.constant(flatten(v2.1)),
    };
    let out = ocl_loss(&mut tape, &a, &b, p, tau).unwrap();
    tape.item(out.loss)
}

#[test]
fn ocl_symmetry_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..30 {
        let n = rng.random_range(2..=8);
        let (s1, t1, s2, t2) = (
            unit_rows(&mut rng, n, 4),
            unit_rows(&mut rng, n, 4),
            unit_rows(&mut rng, n, 4),
            unit_rows(&mut rng, n, 4),
        );
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let p = pairing_weights(&scores, &classes, 0.7);
        let ab = ocl_value((&s1, &t1), (&s2, &t2), &p, 0.07);
        let ba = ocl_value((&s2, &t2), (&s1, &t1), &p, 0.07);
        assert_eq!(ab.to_bits(), ba.to_bits());
        let w = weights_rows(&p);
        let oracle = 0.5 * (contrastive_oracle(&s1, &t1, &w, 0.07) + contrastive_oracle(&s2, &t2, &w, 0.07));
        assert!((ab - oracle).abs() < 1e-10);
        let same = ocl_value((&s1, &t1), (&s1, &t1), &p, 0.07);
        assert!((same - contrastive_value(&s1, &t1, &p, 0.07)).abs() < 1e-12);
    }
    let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut tape = Tape::new();
    let b = RoiEmbeddingBatch {
        student: tape.constant(flatten(&z)),
        teacher: tape.constant(flatten(&z)),
    };
    assert!(ocl_loss(&mut tape, &b, &b, &PairingMatrix::identity(3), 0.07).is_err());
}

// ---------- aggregate losses ----------

#[test]
fn supervised_and_total_loss() {
    let v = eval(|t| {
        let n: Vec<NodeId> = [1.0, 2.0, 3.0, 4.0].iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        supervised_loss(t, n[0], n[1], n[2], n[3])
    });
    assert_eq!(v, 10.0);
    let v = eval(|t| {
        let z = t.constant(Tensor::scalar(0.0));
        supervised_loss(t, z, z, z, z)
    });
    assert_eq!(v, 0.0);

    let total = |lu: f64, lo: f64, (s, u, o): (f64, f64, f64)| {
        eval(|t| {
            let (s, u, o) = (t.constant(Tensor::scalar(s)), t.constant(Tensor::scalar(u)), t.constant(Tensor::scalar(o)));
            total_loss(t, s, u, o, lu, lo)
        })
    };
    assert!((total(4.0, 0.1, (1.0, 1.0, 1.0)) - 5.1).abs() < 1e-12);
    assert_eq!(total(0.0, 0.0, (2.5, 7.0, 3.0)), 2.5);
    // linear in each weight: two-point evaluation predicts a third
    let parts = (0.7, 1.3, -2.1);
    let (a0, a1) = (total(1.0, 0.2, parts), total(3.0, 0.2, parts));
    let slope = (a1 - a0) / 2.0;
    assert!((total(6.0, 0.2, parts) - (a0 + 5.0 * slope)).abs() < 1e-12);
    assert!((slope - parts.1).abs() < 1e-12);
    let (b0, b1) = (total(1.0, 0.0, parts), total(1.0, 0.5, parts));
    assert!(((b1 - b0) / 0.5 - parts.2).abs() < 1e-12);
}

// ---------- gradients ----------

fn gradcheck(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<NodeId>) {
    let report = finite_difference_check(store, f, FD_STEP, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn every_loss_passes_finite_difference_check() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let mut store = ParamStore::new();
        store.add("logits", random_matrix(&mut rng, 4, 5, 2.0), ParamKind::Trainable).unwrap();
        gradcheck(&mut store, |t, st| {
            let l = t.param(st, "logits")?;
            cross_entropy(t, l, &targets)
        });
        gradcheck(&mut store, |t, st| {
            let l = t.param(st, "logits")?;
            focal_loss(t, l, &targets, 2.0, 0.25)
        });

        // keep residuals away from the smooth-L1 kink at |x| = 1
        let mut store = ParamStore::new();
        let pred: Vec<f64> = (0..12)
            .map(|_| {
                let m = rng.random_range(0.1..0.8) + if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        store.add("pred", mat(3, 4, pred), ParamKind::Trainable).unwrap();
        store.add("alpha", random_matrix(&mut rng, 3, 4, 2.0), ParamKind::Trainable).unwrap();
        gradcheck(&mut store, |t, st| {
            let p = t.param(st, "pred")?;
            let z = t.constant(Tensor::zeros(&[3, 4]));
            smooth_l1(t, p, z, 1.0)
        });
        gradcheck(&mut store, |t, st| {
            let p = t.param(st, "pred")?;
            let a = t.param(st, "alpha")?;
            let z = t.constant(Tensor::zeros(&[3, 4]));
            uncertainty_reg_loss(t, p, z, a, 0.25, 1.0)
        });

        let n = rng.random_range(3..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let pairing = pairing_weights(&scores, &classes, 0.7);
        let teacher1 = random_matrix(&mut rng, n, 4, 1.0);
        let teacher2 = random_matrix(&mut rng, n, 4, 1.0);
        let mut store = ParamStore::new();
        store.add("s1", random_matrix(&mut rng, n, 4, 1.0), ParamKind::Trainable).unwrap();
        store.add("s2", random_matrix(&mut rng, n, 4, 1.0), ParamKind::Trainable).unwrap();
        let view = |t: &mut Tape, st: &ParamStore, s: &str, teacher: &Tensor| -> Result<RoiEmbeddingBatch> {
            let raw = t.param(st, s)?;
            let tc = t.constant(teacher.clone());
            Ok(RoiEmbeddingBatch {
                student: t.l2_normalize(raw)?,
                teacher: t.l2_normalize(tc)?,
            })
        };
        gradcheck(&mut store, |t, st| {
            let v = view(t, st, "s1", &teacher1)?;
            Ok(contrastive_loss(t, &v, &pairing, 0.5)?.loss)
        });
        gradcheck(&mut store, |t, st| {
            let v1 = view(t, st, "s1", &teacher1)?;
            let v2 = view(t, st, "s2", &teacher2)?;
            Ok(ocl_loss(t, &v1, &v2, &pairing, 0.5)?.loss)
        });
    }
}

#[test]
fn uncertainty_loss_gradient_at_unit_sigma() {
    let mut store = ParamStore::new();
    store.add("alpha", Tensor::zeros(&[2, 4]), ParamKind::Trainable).unwrap();
    let pred = mat(2, 4, vec![0.3, -0.6, 1.7, 0.05, -2.2, 0.4, 0.9, -0.1]);
    gradcheck(&mut store, |t, st| {
        let a = t.param(st, "alpha")?;
        let p = t.constant(pred.clone());
        let z = t.constant(Tensor::zeros(&[2, 4]));
        uncertainty_reg_loss(t, p, z, a, 0.25, 1.0)
    });
}

#[test]
fn teacher_side_gets_no_gradient() {
    let mut store = ParamStore::new();
    store.add("s", mat(3, 2, vec![0.3, 1.0, -0.5, 0.2, 0.9, 0.9]), ParamKind::Trainable).unwrap();
    store.add("t", mat(3, 2, vec![1.0, 0.1, 0.4, -0.8, 0.2, 0.7]), ParamKind::Trainable).unwrap();
    let mut tape = Tape::new();
    let s = tape.param(&store, "s").unwrap();
    let t = tape.param(&store, "t").unwrap();
    let batch = RoiEmbeddingBatch {
        student: tape.l2_normalize(s).unwrap(),
        teacher: tape.l2_normalize(t).unwrap(),
    };
    let out = contrastive_loss(&mut tape, &batch, &pairing_weights(&[0.9, 0.8, 0.95], &[0, 0, 1], 0.7), 0.07).unwrap();
    tape.backward(out.loss).unwrap().accumulate_into(&mut store);
    assert!(store.get("t").unwrap().grad.data().iter().all(|&g| g == 0.0));
    assert!(store.get("s").unwrap().grad.data().iter().any(|&g| g != 0.0));
}
