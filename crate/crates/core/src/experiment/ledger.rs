use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pipeline::StepReport;

pub const LEDGER_HEADER: &str =
    "iteration,stage,L_sup,L_unsup,L_ocl,L_total,n_cls_labels,n_reg_labels,mean_sigma,teacher_AP50,teacher_AP5095,reg_subset";

/// One training iteration. The AP columns hold the held-out AP of the
/// current teacher (the student during pre-training) on evaluation
/// iterations and are empty otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub iteration: u64,
    pub stage: String,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_ocl: f64,
    pub l_total: f64,
    pub n_cls_labels: usize,
    pub n_reg_labels: usize,
    pub mean_sigma: f64,
    pub teacher_ap50: Option<f64>,
    pub teacher_ap50_95: Option<f64>,
    pub reg_subset: bool,
}

impl LedgerRow {
    pub fn from_report(r: &StepReport) -> Self {
        LedgerRow {
            iteration: r.iteration,
            stage: r.stage.as_str().to_string(),
            l_sup: r.l_sup,
            l_unsup: r.l_unsup,
            l_ocl: r.l_ocl,
            l_total: r.l_total,
            n_cls_labels: r.n_cls_labels,
            n_reg_labels: r.n_reg_labels,
            mean_sigma: r.mean_sigma,
            teacher_ap50: None,
            teacher_ap50_95: None,
            reg_subset: r.reg_subset_of_cls,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Values are written in shortest round-trip form, so equal runs give
/// byte-identical files.
pub fn ledger_to_csv(rows: &[LedgerRow]) -> String {
    let mut out = String::from(LEDGER_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.stage,
            r.l_sup,
            r.l_unsup,
            r.l_ocl,
            r.l_total,
            r.n_cls_labels,
            r.n_reg_labels,
            r.mean_sigma,
            opt(r.teacher_ap50),
            opt(r.teacher_ap50_95),
            r.reg_subset
        );
    }
    out
}

pub fn ledger_from_csv(text: &str) -> Result<Vec<LedgerRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LEDGER_HEADER => {}
        _ => return Err(Error::Parse { what: "ledger", line: 1, msg: "unexpected header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { what: "ledger", line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(err("expected 12 fields"));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        let count = |s: &str| s.parse::<usize>().map_err(|_| err("bad count"));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { float(s).map(Some) };
        rows.push(LedgerRow {
            iteration: f[0].parse().map_err(|_| err("bad iteration"))?,
            stage: f[1].to_string(),
            l_sup: float(f[2])?,
            l_unsup: float(f[3])?,
            l_ocl: float(f[4])?,
            l_total: float(f[5])?,
            n_cls_labels: count(f[6])?,
            n_reg_labels: count(f[7])?,
            mean_sigma: float(f[8])?,
            teacher_ap50: maybe(f[9])?,
            teacher_ap50_95: maybe(f[10])?,
            reg_subset: f[11].parse().map_err(|_| err("bad flag"))?,
        });
    }
    Ok(rows)
}
