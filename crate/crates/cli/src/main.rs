use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ssod_core::autodiff::checkpoint;
use ssod_core::detector::{write_detections, Detector};
use ssod_core::experiment::{
    ablation_cells, evaluate_store, run, run_cells, treg_cells, treg_sweep_csv, Dataset, ExperimentConfig, GridReport, Progress,
};
use ssod_core::scenes::{write_manifest, write_ppm, Manifest};

const TREG_VALUES: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Semi-supervised detection experiments on synthetic scenes.
///
/// Settings come from the defaults, then `--config`, then `key=value`
/// overrides (also accepted as `--key=value`), later ones winning.
/// SSOD_OUT_ROOT, when set, is the directory relative output paths resolve
/// against.
#[derive(Parser)]
#[command(name = "ssod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset: a manifest and, optionally, PPM images.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also write one PPM image per scene.
        #[arg(long)]
        images: bool,
    },
    /// Pre-train, run mutual learning and evaluate one configuration.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Baseline / contrastive / uncertainty / both, over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Evaluate a checkpoint on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep the box-filter threshold over 0.3..0.7 on the full model.
    SweepTreg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Further overrides as `key=value` or `--key=value`.
    #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
    /// Print progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct Seeds {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
}

impl Common {
    fn progress(&self) -> Progress {
        Progress(self.verbose || self.overrides.iter().any(|o| o == "-v" || o == "--verbose"))
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let flags = ["-v", "--verbose"];
        let overrides = self.overrides.iter().filter(|o| !flags.contains(&o.as_str()));
        cfg.apply(self.set.iter().chain(overrides).map(String::as_str))?;
        cfg.validate()?;
        if let Ok(root) = std::env::var("SSOD_OUT_ROOT") {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = Path::new(&root).join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }
}

fn print_grid(report: &GridReport, dir: &Path) {
    print!("{}", report.grid_csv());
    for f in report.failures() {
        eprintln!("seed {} cell {} failed: {}", f.seed, f.cell, f.outcome.as_ref().err().map(String::as_str).unwrap_or(""));
    }
    println!("wrote {}", dir.join("grid.csv").display());
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { common, images } => {
            let cfg = common.config()?;
            let data = Dataset::generate(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_manifest(&cfg.output_dir.join("manifest.tsv"), &Manifest::from_scenes(&data.train, cfg.seed, cfg.labeled_fraction))?;
            if images {
                let dir = cfg.output_dir.join("images");
                std::fs::create_dir_all(&dir)?;
                for s in &data.train {
                    write_ppm(&dir.join(format!("{:05}.ppm", s.id)), &s.image)?;
                }
            }
            println!("{} scenes ({} labeled) in {}", data.train.len(), data.labeled().len(), cfg.output_dir.display());
        }
        Command::Train { common } => {
            let cfg = common.config()?;
            let out = run(&cfg, None, common.progress())?;
            print!("{}", out.summary().to_text());
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Ablate { common, seeds } => {
            let cfg = common.config()?;
            let report = run_cells(&cfg, &ablation_cells(), &seeds.seeds, &cfg.output_dir, common.progress())?;
            print_grid(&report, &cfg.output_dir);
        }
        Command::Eval { common, checkpoint: path } => {
            let cfg = common.config()?;
            let store = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let data = Dataset::generate(&cfg)?;
            let e = evaluate_store(&Detector::new(cfg.detector()), &store, &data.test, &cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("ap_report.csv"), e.ap.to_csv())?;
            write_detections(&cfg.output_dir.join("detections.tsv"), &e.records)?;
            match &e.correlation {
                Some(c) => {
                    std::fs::write(cfg.output_dir.join("correlation.csv"), c.to_csv())?;
                    println!("AP50 {} AP75 {} AP50:95 {} spearman {}", e.ap.ap50, e.ap.ap75, e.ap.ap50_95, c.spearman_rho);
                }
                None => println!("AP50 {} AP75 {} AP50:95 {} spearman NA", e.ap.ap50, e.ap.ap75, e.ap.ap50_95),
            }
        }
        Command::SweepTreg { common, seeds } => {
            let cfg = common.config()?;
            if !cfg.rupl {
                bail!("the threshold sweep needs modules.rupl = true");
            }
            let cells = treg_cells(&TREG_VALUES);
            let report = run_cells(&cfg, &cells, &seeds.seeds, &cfg.output_dir, common.progress())?;
            let pairs: Vec<(f64, String)> = TREG_VALUES.iter().zip(&cells).map(|(t, c)| (*t, c.name.clone())).collect();
            let csv = treg_sweep_csv(&report, &pairs);
            std::fs::write(cfg.output_dir.join("treg_sweep.csv"), &csv)?;
            print!("{csv}");
            print_grid(&report, &cfg.output_dir);
        }
    }
    Ok(())
}
