//! Command-line pipeline: dataset synthesis, pseudo-label growth, training,
//! inference, and evaluation.
//!
//! Every command is deterministic given the configuration, the seed, and
//! its inputs. Numeric work runs in the configured precision (`f32` by
//! default); pass a config file with `precision = f64` to switch.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use vsod_core::config::{Precision, RunConfig};
use vsod_core::io;
use vsod_core::pipeline::{self, Trainer};
use vsod_core::Scalar;

#[derive(Parser)]
#[command(
    name = "vsod",
    version,
    about = "Point-supervised video salient object detection"
)]
struct Cli {
    /// Run configuration file (key = value lines); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the seeded synthetic clip dataset to the output directory.
    Synth,
    /// Grow tri-level pseudo-labels from the dataset's point annotations.
    Pseudolabel {
        /// Dataset root holding clip_* directories.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on a clip dataset; writes train.log and checkpoints.
    Train {
        /// Dataset root holding clip_* directories.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint prefix to start from instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write one saliency map per frame using a trained checkpoint.
    Infer {
        /// Checkpoint prefix (the path without .manifest / .bin).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root holding clip_* directories.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score prediction maps against a dataset's ground-truth masks.
    Eval {
        /// Root of predicted maps, mirroring the clip layout.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset root holding the ground-truth masks.
        #[arg(long)]
        gt: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn need_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .context("--out <dir> is required for this command")
}

fn train<F: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut trainer = Trainer::<F>::new(cfg, data)?;
    if let Some(prefix) = init {
        trainer.load_checkpoint(prefix)?;
        println!("initialized from {}", prefix.display());
    }
    let report = trainer.run(out, |line| println!("{line}"))?;
    let ckpt = report
        .checkpoints
        .last()
        .context("no training steps configured")?;
    println!("log {}", report.log_path.display());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn infer<F: Scalar>(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let maps = pipeline::infer::<F>(cfg, ckpt, data, out)?;
    println!("wrote {} maps under {}", maps.len(), out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<()> {
    let report = pipeline::evaluate(cfg, pred, gt)?;
    println!("clip,frames,mae,f_beta,s_measure");
    for (name, m) in &report.per_clip {
        println!("{name},{},{:.6},{:.6},{:.6}", m.frames, m.mae, m.f_max, m.s);
    }
    let o = &report.overall;
    println!("overall,{},{:.6},{:.6},{:.6}", o.frames, o.mae, o.f_max, o.s);
    println!();
    if !report.unmatched.is_empty() {
        println!("{} unmatched frames excluded:", report.unmatched.len());
        for f in &report.unmatched {
            println!("  {f}");
        }
    }
    println!(
        "{} clips, {} frames: MAE {:.4}, max F-beta {:.4}, S-measure {:.4}",
        report.per_clip.len(),
        o.frames,
        o.mae,
        o.f_max,
        o.s
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Synth => {
            let out = need_out(&cli)?;
            let sc = cfg.synth_config();
            io::synth_dataset(&sc, out)?;
            println!(
                "wrote {} clips of {} frames ({}x{}) under {}",
                sc.clips,
                sc.frames,
                sc.w,
                sc.h,
                out.display()
            );
        }
        Cmd::Pseudolabel { data } => {
            let out = need_out(&cli)?;
            let s = pipeline::pseudolabel(&cfg, data, out)?;
            println!(
                "wrote {} labels ({} frames skipped without annotations)",
                s.written, s.skipped
            );
            println!(
                "label mass: {:.1}% foreground, {:.1}% background, {:.1}% unlabeled",
                100.0 * s.fg_fraction,
                100.0 * s.bg_fraction,
                100.0 * s.unlabeled_fraction
            );
        }
        Cmd::Train { data, init } => {
            let out = need_out(&cli)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, data, init.as_deref(), out)?,
                Precision::F64 => train::<f64>(&cfg, data, init.as_deref(), out)?,
            }
        }
        Cmd::Infer { ckpt, data } => {
            let out = need_out(&cli)?;
            match cfg.precision {
                Precision::F32 => infer::<f32>(&cfg, ckpt, data, out)?,
                Precision::F64 => infer::<f64>(&cfg, ckpt, data, out)?,
            }
        }
        Cmd::Eval { pred, gt } => eval(&cfg, pred, gt)?,
    }
    Ok(())
}
