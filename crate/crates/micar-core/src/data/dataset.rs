//! On-disk dataset loader: `images/NNNNNN.pgm` + `captions.jsonl` +
//! `vocab.json`. Images are loaded eagerly (desk scale), scaled to [0, 1],
//! and replicated to three channels; captions are tokenized against the
//! shipped vocabulary.

use std::path::{Path, PathBuf};

use crate::data::pgm;
use crate::data::synth::CaptionLine;
use crate::data::vocab::{TokenizedReport, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Split, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    /// `[3, H, W]` in [0, 1]; grayscale replicated across channels.
    pub image: Tensor,
    pub report: TokenizedReport,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub examples: Vec<Example>,
}

fn gray_to_tensor(img: &pgm::Gray) -> Tensor {
    let hw = img.width * img.height;
    let mut data = Vec::with_capacity(3 * hw);
    for _ in 0..3 {
        data.extend(img.pixels.iter().map(|&p| p as f64 / 255.0));
    }
    Tensor::new(&[3, img.height, img.width], data)
}

impl Dataset {
    /// Read the full directory layout. Every caption is tokenized and
    /// padded to `max_len`; errors name the offending `captions.jsonl` line.
    pub fn open(root: &Path, max_len: usize) -> Result<Dataset> {
        let vocab = Vocabulary::load(&root.join("vocab.json"))?;
        let captions_path = root.join("captions.jsonl");
        let text = std::fs::read_to_string(&captions_path)?;

        let mut examples = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let fail = |msg: String| Error::Parse {
                path: captions_path.display().to_string(),
                line: lineno,
                msg,
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CaptionLine =
                serde_json::from_str(line).map_err(|e| fail(format!("bad caption record: {e}")))?;
            let split: Split = parsed
                .split
                .parse()
                .map_err(|()| fail(format!("unknown split `{}`", parsed.split)))?;
            let image_path = root.join("images").join(format!("{}.pgm", parsed.id));
            if !image_path.exists() {
                return Err(fail(format!("referenced image `{}` is missing", image_path.display())));
            }
            let image = gray_to_tensor(&pgm::read(&image_path)?);
            let report = vocab.encode(&parsed.text, max_len);
            examples.push(Example { id: parsed.id, image, report, split });
        }
        if examples.is_empty() {
            return Err(Error::Contract(format!(
                "dataset at `{}` has no examples",
                root.display()
            )));
        }
        Ok(Dataset { root: root.to_path_buf(), vocab, max_len, examples })
    }

    /// Indices of one split, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len()).filter(|&i| self.examples[i].split == split).collect()
    }

    /// A seeded per-epoch shuffle of one split's indices.
    pub fn epoch_order(&self, split: Split, seed: u64, epoch: u64) -> Vec<usize> {
        let base = self.split_indices(split);
        let mut r = rng::stream(seed, "shuffle", epoch);
        rng::permutation(base.len(), &mut r).into_iter().map(|i| base[i]).collect()
    }
}
