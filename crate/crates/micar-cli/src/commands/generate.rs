//! `micar generate` — beam-search captions for one image or a dataset
//! split, written as JSONL (`{"id": ..., "text": ...}` per line).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::Parser;
use serde::{Deserialize, Serialize};

use micar_core::checkpoint;
use micar_core::data::dataset::Dataset;
use micar_core::decode;

use crate::commands::{image_tensor, parse_split};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub text: String,
}

#[derive(Parser)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Caption a single PGM image
    #[arg(long, conflicts_with_all = ["data", "split"])]
    image: Option<PathBuf>,
    /// Caption every example of --split in this dataset directory
    #[arg(long, requires = "split")]
    data: Option<PathBuf>,
    /// Dataset split to caption (train, val, or test)
    #[arg(long, requires = "data")]
    split: Option<String>,
    /// Beam width (1 is greedy)
    #[arg(long, default_value_t = 3)]
    width: usize,
    /// Generation length cap; defaults to the checkpoint's sequence bound
    #[arg(long)]
    max_len: Option<usize>,
    /// Never emit the unknown-word token
    #[arg(long)]
    ban_unk: bool,
    /// Write JSONL here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let model = loaded.model;
    let vocab = loaded.vocab;
    let max_len = args.max_len.unwrap_or(model.cfg.max_len);

    let mut lines = Vec::new();
    if let Some(image_path) = &args.image {
        let image = image_tensor(image_path, model.cfg.vision.in_channels)?;
        let ids = decode::generate_caption(&model, &image, args.width, max_len, args.ban_unk)?;
        let id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| image_path.display().to_string());
        lines.push(serde_json::to_string(&Prediction { id, text: vocab.decode(&ids) })?);
    } else if let (Some(dir), Some(split)) = (&args.data, &args.split) {
        let split = parse_split(split)?;
        let data = Dataset::open(dir, model.cfg.max_len)?;
        if data.vocab != vocab {
            bail!(
                "vocabulary mismatch: the checkpoint knows {} tokens, the dataset {}",
                vocab.len(),
                data.vocab.len()
            );
        }
        for i in data.split_indices(split) {
            let ex = &data.examples[i];
            let ids = decode::generate_caption(&model, &ex.image, args.width, max_len, args.ban_unk)?;
            lines.push(serde_json::to_string(&Prediction {
                id: ex.id.clone(),
                text: vocab.decode(&ids),
            })?);
        }
    } else {
        bail!("pass either --image or --data with --split");
    }

    let mut body = lines.join("\n");
    body.push('\n');
    match &args.out {
        Some(path) => {
            std::fs::write(path, body)?;
            println!("wrote {} predictions to `{}`", lines.len(), path.display());
        }
        None => print!("{body}"),
    }
    Ok(ExitCode::SUCCESS)
}
