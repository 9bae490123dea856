//! Command-line driver: dataset generation, training, evaluation, plotting,
//! and the component-toggle ablation grid.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use veriface_core::config::Config;
use veriface_core::data;
use veriface_core::metrics::EvalReport;
use veriface_core::plot::plot_reports;
use veriface_core::train;

/// Environment variable overriding every `--out` path.
const OUT_ENV: &str = "VERIFACE_OUT";

#[derive(Parser)]
#[command(name = "veriface", version, about = "Multi-face forgery detection: train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(path) => Config::from_file(path).context("loading config"),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy dataset (images + COCO manifest).
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 100)]
        images: usize,
    },
    /// Train on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset manifest (or a directory containing manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the step log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a predictions file) against a dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Pre-computed detections in COCO results format.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Report JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write raw detections in COCO results format.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Scatter plot (AP vs oLRP) over one or more report files.
    Plot {
        /// Report JSON files; point labels come from file stems.
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 8-configuration toggle grid (augment x fea x bi-grained).
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for evaluation; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_out(out: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => out,
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path) -> Result<data::Dataset> {
    data::load_manifest(&manifest_path(data)).context("loading dataset manifest")
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, images } => {
            let cfg = config.load()?;
            let out = resolve_out(out);
            let dataset = data::generate_toy_dataset(&cfg.data, images, &out)?;
            let faces: usize = dataset.records.iter().map(|r| r.faces.len()).sum();
            println!(
                "wrote {} images ({faces} faces) and manifest.json to {}",
                dataset.len(),
                out.display()
            );
        }
        Command::Train { config, data, out, resume } => {
            let cfg = config.load()?;
            let out = resolve_out(out);
            let dataset = load_dataset(&data)?;
            let outcome = train::train_resumable(&cfg, &dataset, &out, resume.as_deref())?;
            println!(
                "trained {} steps; final checkpoint {}",
                outcome.steps,
                outcome.final_checkpoint.display()
            );
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            predictions,
            out,
            predictions_out,
        } => {
            let cfg = config.load()?;
            let out = resolve_out(out);
            let dataset = load_dataset(&data)?;
            let (report, dets) = match (checkpoint, predictions) {
                (Some(ck), None) => train::evaluate_checkpoint(&cfg, &ck, &dataset)?,
                (None, Some(preds)) => {
                    let dets = data::load_predictions(&preds)?;
                    let gts = gts_of(&dataset);
                    (veriface_core::metrics::evaluate_detections(&dets, &gts), dets)
                }
                _ => bail!("pass exactly one of --checkpoint or --predictions"),
            };
            if let Some(p) = predictions_out {
                data::save_predictions(&dets, &p)?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "detection AP {:.1} oLRP {:.1} | segmentation AP {:.1} oLRP {:.1} -> {}",
                report.detection.ap,
                report.detection.olrp,
                report.segmentation.ap,
                report.segmentation.olrp,
                out.display()
            );
        }
        Command::Plot { reports, out } => {
            let out = resolve_out(out);
            if reports.is_empty() {
                bail!("pass at least one report file");
            }
            let mut named = Vec::new();
            for path in &reports {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let report: EvalReport = serde_json::from_str(&text)?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                named.push((name, report));
            }
            plot_reports(&named, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate {
            config,
            data,
            eval_data,
            out,
        } => {
            let base = config.load()?;
            let out = resolve_out(out);
            std::fs::create_dir_all(&out)?;
            let train_set = load_dataset(&data)?;
            let eval_set = match eval_data {
                Some(p) => load_dataset(&p)?,
                None => train_set.clone(),
            };
            let mut named = Vec::new();
            for bits in 0..8u8 {
                let (da, fea, bi) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
                let mut cfg = base.clone();
                cfg.train.augment = da;
                cfg.train.fea = fea;
                cfg.train.coarse = bi;
                cfg.train.fine = bi;
                let tag = format!(
                    "da{}_fea{}_bi{}",
                    u8::from(da),
                    u8::from(fea),
                    u8::from(bi)
                );
                let run_dir = out.join(&tag);
                let outcome = train::train(&cfg, &train_set, &run_dir)?;
                let (report, _) =
                    train::evaluate_checkpoint(&cfg, &outcome.final_checkpoint, &eval_set)?;
                std::fs::write(
                    run_dir.join("report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                println!(
                    "{tag}: detection AP {:.1} oLRP {:.1} | segmentation AP {:.1} oLRP {:.1}",
                    report.detection.ap,
                    report.detection.olrp,
                    report.segmentation.ap,
                    report.segmentation.olrp
                );
                named.push((tag, report));
            }
            plot_reports(&named, &out.join("scatter.svg"))?;
            println!("ablation grid done -> {}", out.display());
        }
    }
    Ok(())
}

fn gts_of(dataset: &data::Dataset) -> Vec<veriface_core::metrics::GtInstance> {
    let mut gts = Vec::new();
    for rec in &dataset.records {
        for f in &rec.faces {
            gts.push(veriface_core::metrics::GtInstance {
                image_id: rec.id,
                class: f.label,
                bbox: f.bbox,
                mask: Some(f.mask.clone()),
                area: f.mask.iter().filter(|&&v| v != 0).count() as f64,
            });
        }
    }
    gts
}
