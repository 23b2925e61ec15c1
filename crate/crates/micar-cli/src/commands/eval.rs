//! `micar eval` — score a predictions JSONL file against the references of
//! a dataset split and write the metric report as JSON.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use micar_core::data::dataset::Dataset;
use micar_core::data::vocab;
use micar_core::metrics;

use crate::commands::generate::Prediction;
use crate::commands::parse_split;

/// References only need the raw caption text, so any legal length bound
/// works for opening the dataset here.
const REFERENCE_MAX_LEN: usize = 60;

#[derive(Parser)]
pub struct Args {
    /// Predictions JSONL, one {"id", "text"} object per line
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset directory holding the references
    #[arg(long)]
    data: PathBuf,
    /// Split whose references to score against (train, val, or test)
    #[arg(long)]
    split: String,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<ExitCode> {
    let split = parse_split(&args.split)?;
    let data = Dataset::open(&args.data, REFERENCE_MAX_LEN)?;
    let references: Vec<(String, Vec<String>)> = data
        .split_indices(split)
        .iter()
        .map(|&i| {
            let ex = &data.examples[i];
            (ex.id.clone(), vocab::tokenize(&ex.report.text))
        })
        .collect();

    let text = std::fs::read_to_string(&args.predictions)
        .with_context(|| format!("cannot read `{}`", args.predictions.display()))?;
    let mut predictions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad prediction line", args.predictions.display(), i + 1))?;
        predictions.push((p.id, vocab::tokenize(&p.text)));
    }

    let report = metrics::evaluate_corpus(&predictions, &references)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!("wrote `{}`", path.display());
        }
        None => println!("{json}"),
    }
    println!(
        "BLEU-1 {:.4}  BLEU-4 {:.4}  avg-BLEU {:.4}  ROUGE-L {:.4}",
        report.bleu_1, report.bleu_4, report.avg_bleu, report.rouge_l
    );
    Ok(ExitCode::SUCCESS)
}
