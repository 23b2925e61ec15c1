//! Deterministic synthetic corpus: small grayscale geometry with templated
//! captions. 3 shapes x 5 positions x 2 intensities = 30 classes, cycled
//! over the requested count and jittered by at most one pixel.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::pgm::{self, Gray};
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::rng;

pub const SHAPES: [&str; 3] = ["circle", "square", "cross"];
pub const POSITIONS: [&str; 5] = ["top-left", "top-right", "bottom-left", "bottom-right", "center"];
pub const INTENSITIES: [&str; 2] = ["dim", "bright"];
pub const CLASSES: usize = SHAPES.len() * POSITIONS.len() * INTENSITIES.len();

const BACKGROUND: u8 = 16;
const FILL: [u8; 2] = [120, 240]; // dim, bright

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Side length of the square images (must be a positive multiple of 32
    /// for the vision encoder, but generation itself only needs > 8).
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { size: 32, seed: 0 }
    }
}

/// One caption line in `captions.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionLine {
    pub id: String,
    pub text: String,
    pub split: String,
}

/// Decompose a class index into (shape, position, intensity) indices.
pub fn class_parts(class: usize) -> (usize, usize, usize) {
    let intensity = class % INTENSITIES.len();
    let rest = class / INTENSITIES.len();
    (rest / POSITIONS.len(), rest % POSITIONS.len(), intensity)
}

/// The caption template is a pure function of the class.
pub fn caption(class: usize) -> String {
    let (s, p, i) = class_parts(class);
    format!("a {} {} in the {}", INTENSITIES[i], SHAPES[s], POSITIONS[p])
}

/// Split assignment: every block of ten consecutive items contributes
/// exactly 8 train, 1 val, and 1 test, but WHICH item plays which role is a
/// seeded per-block permutation. A plain `index % 10` rule would alias with
/// the 30-class cycle and starve the training split of entire classes.
pub fn split_of(seed: u64, index: usize) -> &'static str {
    let mut r = rng::stream(seed, "split", (index / 10) as u64);
    match rng::permutation(10, &mut r)[index % 10] {
        8 => "val",
        9 => "test",
        _ => "train",
    }
}

/// Render one class at `size x size`, with the shape center shifted by
/// `(dy, dx)` pixels.
pub fn render(size: usize, class: usize, dy: i64, dx: i64) -> Gray {
    let (shape, pos, intensity) = class_parts(class);
    let q = (size / 4) as i64;
    let (cy, cx) = match pos {
        0 => (q, q),
        1 => (q, 3 * q),
        2 => (3 * q, q),
        3 => (3 * q, 3 * q),
        _ => (2 * q, 2 * q),
    };
    let (cy, cx) = (cy + dy, cx + dx);
    let r = (size / 8) as i64;
    let fill = FILL[intensity];

    let mut pixels = vec![BACKGROUND; size * size];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let (dy, dx) = (y - cy, x - cx);
            let hit = match shape {
                0 => dy * dy + dx * dx <= r * r,
                1 => dy.abs() <= r && dx.abs() <= r,
                _ => (dy.abs() <= 1 && dx.abs() <= r) || (dx.abs() <= 1 && dy.abs() <= r),
            };
            if hit {
                pixels[(y * size as i64 + x) as usize] = fill;
            }
        }
    }
    Gray { width: size, height: size, pixels }
}

/// Generate `n` (image, caption) pairs under `dir`: `images/NNNNNN.pgm`,
/// `captions.jsonl`, and a `vocab.json` built from the training split only.
pub fn generate(spec: &SyntheticSpec, n: usize, dir: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("cannot generate an empty dataset".into()));
    }
    std::fs::create_dir_all(dir.join("images"))?;

    let mut lines = Vec::with_capacity(n);
    let mut train_texts = Vec::new();
    for i in 0..n {
        let class = i % CLASSES;
        let mut jitter = rng::stream(spec.seed, "jitter", i as u64);
        let dy = jitter.gen_range(-1..=1);
        let dx = jitter.gen_range(-1..=1);
        let img = render(spec.size, class, dy, dx);
        let id = format!("{i:06}");
        pgm::write(&dir.join("images").join(format!("{id}.pgm")), &img)?;

        let text = caption(class);
        let split = split_of(spec.seed, i);
        if split == "train" {
            train_texts.push(text.clone());
        }
        lines.push(serde_json::to_string(&CaptionLine { id, text, split: split.to_string() })?);
    }
    std::fs::write(dir.join("captions.jsonl"), lines.join("\n") + "\n")?;

    let vocab = Vocabulary::build(&train_texts)?;
    vocab.save(&dir.join("vocab.json"))?;
    Ok(())
}
