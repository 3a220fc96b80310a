//! Central finite-difference oracle for tape gradients.

use super::params::{ParamKind, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// max over elements of |analytic - numeric| / max(|numeric|, 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.rel_tol
    }
}

fn evaluate<F>(store: &ParamStore, fragment: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let out = fragment(&mut tape, store)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares analytic gradients of `fragment` against central differences
/// for every trainable entry of `store`.
///
/// The fragment is evaluated twice up front; any difference between the two
/// values is reported as [`Error::NonDeterministic`].
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    fragment: F,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if rel_tol <= 0.0 || step <= 0.0 {
        return Err(Error::invalid("rel_tol and step must be positive"));
    }
    let first = evaluate(store, &fragment)?;
    let second = evaluate(store, &fragment)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let loss = fragment(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::new();
    for idx in 0..store.len() {
        let p = store.by_index(idx);
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let name = p.name.clone();
        let analytic = grads.param_grad(store, &name)?;
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for e in 0..store.by_index(idx).value.numel() {
            let orig = store.by_index(idx).value.data()[e];
            store.by_index_mut(idx).value.data_mut()[e] = orig + step;
            let plus = evaluate(store, &fragment);
            store.by_index_mut(idx).value.data_mut()[e] = orig - step;
            let minus = evaluate(store, &fragment);
            store.by_index_mut(idx).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let abs = (analytic.data()[e] - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(1e-8));
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { entries, rel_tol })
}
