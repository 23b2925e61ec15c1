//! `micar gradcheck` — verify the analytic gradients of the fully composed
//! model (vision encoder through mixture-of-experts decoder to the loss)
//! against central finite differences, one perturbation per parameter
//! scalar, and report the worst relative error per parameter group.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use micar_core::data::vocab::{EOS, SOS};
use micar_core::gradcheck;
use micar_core::model::{self, total_loss};
use micar_core::{ModelConfig, Phase, Session, Tensor, VisionConfig};

use crate::run_config::{self, resolve_seed};

#[derive(Parser)]
pub struct Args {
    /// Optional run config whose model section replaces the built-in
    /// minimal configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the probe point (`MICAR_SEED` also applies)
    #[arg(long)]
    seed: Option<u64>,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Pass/fail tolerance on the worst relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Smallest configuration that still exercises every code path: two heads
/// with both attention branches, four experts with top-2 routing, and the
/// full four-stage vision pyramid on a 32x32 image.
fn minimal_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_latent: 24,
        heads: 2,
        d_nope: 6,
        d_rope: 6,
        d_ff: 32,
        n_enc: 1,
        n_dec: 1,
        experts: 4,
        top_k: 2,
        vocab_size: 16,
        max_len: 8,
        vision: VisionConfig {
            base_channels: 2,
            blocks_per_stage: 1,
            d_pyramid: 4,
            d_fused: 16,
            grid: 2,
            ..VisionConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// A fixed quasi-random image; any generic probe point works for finite
/// differences, and this one needs no RNG.
fn pattern_image(channels: usize, side: usize) -> Tensor {
    let data = (0..channels * side * side)
        .map(|i| ((i * 2654435761) % 977) as f64 / 976.0)
        .collect();
    Tensor::new(&[channels, side, side], data)
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let cfg = match &args.config {
        Some(path) => run_config::load(path)?.model,
        None => minimal_config(),
    };
    cfg.validate()?;
    let seed = resolve_seed(args.seed, 7)?;

    let (mut params, bufs) = model::register_params(&cfg, seed);
    gradcheck::scale_to_generic_point(&mut params, seed);

    let image = pattern_image(cfg.vision.in_channels, 32);
    let tokens = [SOS, 4, 5, 6, 7, 8];
    let targets = [4, 5, 6, 7, 8, EOS];
    let loss_of = |p: &micar_core::ParamStore| {
        let mut sess = Session::new(Phase::GradCheck, 41, 0);
        let mut bufs = bufs.clone();
        let out = model::forward(&mut sess, p, &mut bufs, &cfg, &image, &tokens)
            .expect("the forward pass is valid by construction");
        let losses = total_loss(&mut sess, &cfg, out.logits, &targets, &out.load_balance)
            .expect("the loss is valid by construction");
        (sess, losses.total)
    };

    let (mut sess, loss) = loss_of(&params);
    sess.tape.backward(loss)?;
    let mut with_grads = params.clone();
    with_grads.zero_grads();
    sess.accumulate_grads(&mut with_grads, 1.0);
    let analytic = gradcheck::grads_by_name(&with_grads);

    let report = gradcheck::check_params(&mut params, &analytic, args.step, |p| {
        let (sess, loss) = loss_of(p);
        sess.tape.scalar(loss)
    });

    print!("{}", report.format_table());
    if report.passes(args.tol) {
        println!("PASS: worst relative error {:.3e} < {:.0e}", report.worst_rel_err, args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "FAIL: `{}` has relative error {:.3e} >= {:.0e}",
            report.worst_param, report.worst_rel_err, args.tol
        );
        Ok(ExitCode::from(2))
    }
}
