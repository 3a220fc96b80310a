//! Multi-seed grids of configuration cells sharing one pre-training per seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::{pretrain_cached, train_mutual, write_run, Dataset, ExperimentConfig, Pretrained, Progress};
use crate::error::{Error, Result};

pub const MAX_CELLS: usize = 32;

/// A named set of `key=value` overrides on a base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Cell {
    pub fn new(name: impl Into<String>, overrides: &[&str]) -> Self {
        Cell { name: name.into(), overrides: overrides.iter().map(|s| s.to_string()).collect() }
    }
}

/// Baseline, each filtering module alone, and both.
pub fn ablation_cells() -> Vec<Cell> {
    vec![
        Cell::new("baseline", &["modules.ocl=false", "modules.rupl=false"]),
        Cell::new("ocl", &["modules.ocl=true", "modules.rupl=false"]),
        Cell::new("rupl", &["modules.ocl=false", "modules.rupl=true"]),
        Cell::new("ocl+rupl", &["modules.ocl=true", "modules.rupl=true"]),
    ]
}

/// The full model at each box-filter threshold.
pub fn treg_cells(values: &[f64]) -> Vec<Cell> {
    values
        .iter()
        .map(|v| {
            Cell {
                name: format!("t_reg={v}"),
                overrides: vec!["modules.ocl=true".into(), "modules.rupl=true".into(), format!("thresholds.t_reg={v}")],
            }
        })
        .collect()
}

/// Headline numbers of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    pub pretrain_ap50: f64,
    pub pretrain_ap75: f64,
    pub pretrain_ap50_95: f64,
    pub pretrain_spearman: Option<f64>,
    pub spearman: Option<f64>,
    pub reg_subset_always: bool,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        format!(
            "ap50 = {}\nap75 = {}\nap50_95 = {}\npretrain_ap50 = {}\npretrain_ap75 = {}\npretrain_ap50_95 = {}\npretrain_spearman = {}\nspearman = {}\nreg_subset_always = {}\n",
            self.ap50,
            self.ap75,
            self.ap50_95,
            self.pretrain_ap50,
            self.pretrain_ap75,
            self.pretrain_ap50_95,
            opt(self.pretrain_spearman),
            opt(self.spearman),
            self.reg_subset_always
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    /// The error message of a failed run.
    pub outcome: std::result::Result<Summary, String>,
    /// Wall-clock time of the mutual stage and evaluation.
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MetricStats {
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(MetricStats { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub cells: Vec<String>,
    pub seeds: Vec<u64>,
    pub results: Vec<CellResult>,
    /// Wall-clock seconds of each pre-training (or cache load), by seed.
    pub pretrain_seconds: Vec<(u64, f64)>,
}

impl GridReport {
    pub fn summaries(&self, cell: &str) -> Vec<&Summary> {
        self.results.iter().filter(|r| r.cell == cell).filter_map(|r| r.outcome.as_ref().ok()).collect()
    }

    pub fn stats(&self, cell: &str, metric: impl Fn(&Summary) -> f64) -> Option<MetricStats> {
        MetricStats::of(&self.summaries(cell).into_iter().map(metric).collect::<Vec<_>>())
    }

    /// Pre-training-only numbers, one per seed, taken from the first
    /// successful cell of that seed.
    pub fn pretrain_stats(&self, metric: impl Fn(&Summary) -> f64) -> Option<MetricStats> {
        let v: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|&s| self.results.iter().find(|r| r.seed == s && r.outcome.is_ok()))
            .filter_map(|r| r.outcome.as_ref().ok().map(&metric))
            .collect();
        MetricStats::of(&v)
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.results.iter().filter(|r| r.outcome.is_err()).collect()
    }

    /// One row per run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("cell,seed,status,AP50,AP75,AP50:95,pretrain_AP50,pretrain_AP75,pretrain_AP50:95,reg_subset_always\n");
        for r in &self.results {
            match &r.outcome {
                Ok(s) => {
                    let _ = writeln!(
                        out,
                        "{},{},ok,{},{},{},{},{},{},{}",
                        r.cell, r.seed, s.ap50, s.ap75, s.ap50_95, s.pretrain_ap50, s.pretrain_ap75, s.pretrain_ap50_95, s.reg_subset_always
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{},{},\"error: {}\",,,,,,,", r.cell, r.seed, e.replace('"', "'"));
                }
            }
        }
        out
    }

    /// Mean and standard deviation per cell over successful seeds, with a
    /// `pretrain-only` row.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("cell,n,AP50_mean,AP50_std,AP75_mean,AP75_std,AP50:95_mean,AP50:95_std\n");
        let mut row = |name: &str, s: [Option<MetricStats>; 3]| {
            let n = s[0].map(|m| m.n).unwrap_or(0);
            let _ = write!(out, "{name},{n}");
            for m in s {
                match m {
                    Some(m) => {
                        let _ = write!(out, ",{},{}", m.mean, m.std);
                    }
                    None => out.push_str(",NA,NA"),
                }
            }
            out.push('\n');
        };
        row("pretrain-only", [self.pretrain_stats(|s| s.pretrain_ap50), self.pretrain_stats(|s| s.pretrain_ap75), self.pretrain_stats(|s| s.pretrain_ap50_95)]);
        for c in &self.cells {
            row(c, [self.stats(c, |s| s.ap50), self.stats(c, |s| s.ap75), self.stats(c, |s| s.ap50_95)]);
        }
        out
    }
}

/// Five-row table of AP50:95 against the box-filter threshold; `cells` pairs
/// each threshold with the grid cell that ran it.
pub fn treg_sweep_csv(report: &GridReport, cells: &[(f64, String)]) -> String {
    let mut out = String::from("t_reg,n,AP50:95_mean,AP50:95_std,AP75_mean,AP50_mean\n");
    for (t, c) in cells {
        match (report.stats(c, |s| s.ap50_95), report.stats(c, |s| s.ap75), report.stats(c, |s| s.ap50)) {
            (Some(a), Some(b), Some(d)) => {
                let _ = writeln!(out, "{t},{},{},{},{},{}", a.n, a.mean, a.std, b.mean, d.mean);
            }
            _ => {
                let _ = writeln!(out, "{t},0,NA,NA,NA,NA");
            }
        }
    }
    out
}

/// Runs every cell for every seed. Each seed generates its dataset once and
/// pre-trains once per distinct pre-training setting (cached under
/// `out_dir/pretrain`). A failing cell is recorded and the grid continues.
pub fn run_cells(base: &ExperimentConfig, cells: &[Cell], seeds: &[u64], out_dir: &Path, progress: Progress) -> Result<GridReport> {
    if cells.is_empty() || cells.len() > MAX_CELLS {
        return Err(Error::Config { key: "grid".into(), msg: format!("needs 1 to {MAX_CELLS} cells, got {}", cells.len()) });
    }
    let mut configs = Vec::with_capacity(cells.len());
    for c in cells {
        let mut cfg = base.clone();
        cfg.apply(c.overrides.iter().map(String::as_str))?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let cache_root = out_dir.join("pretrain");
    let mut results = Vec::new();
    let mut pretrain_seconds = Vec::new();
    for &seed in seeds {
        let mut seed_base = base.clone();
        seed_base.seed = seed;
        let data = match Dataset::generate(&seed_base) {
            Ok(d) => d,
            Err(e) => {
                results.extend(cells.iter().map(|c| CellResult { cell: c.name.clone(), seed, outcome: Err(e.to_string()), seconds: 0.0 }));
                continue;
            }
        };
        let mut pretrained: HashMap<String, std::result::Result<Pretrained, String>> = HashMap::new();
        for (cell, cfg) in cells.iter().zip(&configs) {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            cfg.output_dir = out_dir.join(format!("seed-{seed}")).join(&cell.name);
            let key = cfg.pretrain_key();
            let pre = pretrained.entry(key).or_insert_with(|| {
                let start = Instant::now();
                let p = pretrain_cached(&cfg, &data, &cache_root, progress).map_err(|e| e.to_string());
                pretrain_seconds.push((seed, start.elapsed().as_secs_f64()));
                p
            });
            let start = Instant::now();
            let outcome = match pre {
                Ok(p) => train_mutual(&cfg, &data, p, progress)
                    .and_then(|out| write_run(&cfg.output_dir, &cfg, &out).map(|_| out.summary()))
                    .map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            match &outcome {
                Ok(s) => progress.line(|| format!("[seed {seed}] {}: AP50 {:.4} AP75 {:.4} AP50:95 {:.4}", cell.name, s.ap50, s.ap75, s.ap50_95)),
                Err(e) => progress.line(|| format!("[seed {seed}] {} failed: {e}", cell.name)),
            }
            results.push(CellResult { cell: cell.name.clone(), seed, outcome, seconds: start.elapsed().as_secs_f64() });
        }
    }
    let report = GridReport { cells: cells.iter().map(|c| c.name.clone()).collect(), seeds: seeds.to_vec(), results, pretrain_seconds };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("runs.csv"), report.runs_csv())?;
    std::fs::write(out_dir.join("grid.csv"), report.grid_csv())?;
    Ok(report)
}
