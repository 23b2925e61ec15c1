//! `micar viz` — teacher-force one image/caption pair through the model
//! with trace capture on, then write every decoder attention map (CSV +
//! PGM) and per-layer routing artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use micar_core::artifacts;
use micar_core::checkpoint;
use micar_core::session::AttnTrace;
use micar_core::{Phase, Session};

use crate::commands::image_tensor;

#[derive(Parser)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM image to condition on
    #[arg(long)]
    image: PathBuf,
    /// Caption to trace (teacher-forced; unknown words become <unk>)
    #[arg(long)]
    caption: String,
    /// Output directory
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let mut model = loaded.model;
    let image = image_tensor(&args.image, model.cfg.vision.in_channels)?;
    let report = loaded.vocab.encode(&args.caption, model.cfg.max_len);
    let (input, _) = report.shifted();

    let mut sess = Session::new(Phase::Eval, 0, 0);
    sess.capture = true;
    model.forward(&mut sess, &image, &input)?;

    let decoder_maps: Vec<AttnTrace> = sess
        .traces
        .attention
        .iter()
        .filter(|t| t.scope.starts_with("dec."))
        .cloned()
        .collect();
    let attention_files = artifacts::emit_attention(&args.out, &decoder_maps)?;
    let routing_files = artifacts::emit_routing(&args.out, &sess.traces.routing)?;
    println!(
        "wrote {} attention files ({} maps) and {} routing files to `{}`",
        attention_files.len(),
        decoder_maps.len(),
        routing_files.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
