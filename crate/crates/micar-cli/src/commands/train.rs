//! `micar train` — the epoch loop driven by a run-config file. The model's
//! vocabulary size and sequence bound are derived from the dataset, so the
//! config file never has to guess them.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;

use micar_core::checkpoint;
use micar_core::data::dataset::Dataset;
use micar_core::model::Model;
use micar_core::optim::AdamW;
use micar_core::train::{fit, TrainConfig};

use crate::run_config::{self, resolve_seed};

#[derive(Parser)]
pub struct Args {
    /// Run-config JSON (strict: unknown keys abort)
    #[arg(long)]
    config: PathBuf,
    /// Override train.seed (beats MICAR_SEED and the file)
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override train.lr
    #[arg(long)]
    lr: Option<f64>,
    /// Override data.path
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override paths.checkpoint_dir
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps (0 = no cap)
    #[arg(long, default_value_t = 0)]
    max_steps: u64,
    /// Validate (and refresh best.ckpt) every N epochs; 0 disables
    #[arg(long, default_value_t = 1)]
    val_every: usize,
    /// Beam width for validation decoding
    #[arg(long, default_value_t = 3)]
    val_beam_width: usize,
    /// Continue from `<checkpoint_dir>/last.ckpt`
    #[arg(long)]
    resume: bool,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let mut cfg = run_config::load(&args.config)?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.data {
        cfg.data.path = v;
    }
    if let Some(v) = args.checkpoint_dir {
        cfg.paths.checkpoint_dir = v;
    }
    let seed = resolve_seed(args.seed, cfg.train.seed)?;

    let data = Dataset::open(&cfg.data.path, cfg.data.max_len)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = data.vocab.len();
    model_cfg.max_len = cfg.data.max_len;

    let ckpt_dir = cfg.paths.checkpoint_dir.clone();
    let (mut model, mut opt) = if args.resume {
        // the checkpoint's optimizer hyperparameters win on resume so the
        // continued run is the run that was interrupted
        let path = ckpt_dir.join("last.ckpt");
        let loaded = checkpoint::load(&path)
            .with_context(|| format!("cannot resume from `{}`", path.display()))?;
        if loaded.model.cfg != model_cfg {
            bail!(
                "`{}` was trained with a different model configuration than this run config derives",
                path.display()
            );
        }
        if loaded.vocab != data.vocab {
            bail!("`{}` carries a different vocabulary than the dataset", path.display());
        }
        (loaded.model, loaded.optim)
    } else {
        (Model::new(model_cfg, seed)?, AdamW::new(cfg.train.optimizer()))
    };

    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        gamma: cfg.train.gamma,
        step_epochs: cfg.train.step_epochs,
        seed,
        max_steps: args.max_steps,
        val_every: args.val_every,
        val_beam_width: args.val_beam_width,
    };
    let report = fit(&mut model, &mut opt, &data, &train_cfg, &ckpt_dir)?;
    println!("trained {} steps; metrics at `{}`", report.steps, report.metrics_path.display());
    if let Some(bleu) = report.best_val_bleu1 {
        println!(
            "best validation BLEU-1 {bleu:.4}; checkpoint `{}`",
            ckpt_dir.join("best.ckpt").display()
        );
    }
    Ok(ExitCode::SUCCESS)
}
