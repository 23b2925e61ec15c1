//! One module per subcommand, plus the helpers they share.

pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod synth;
pub mod train;
pub mod viz;

use std::path::Path;

use anyhow::Context;

use micar_core::data::dataset::Split;
use micar_core::data::pgm;
use micar_core::Tensor;

/// Load a PGM as a `[channels, H, W]` tensor in [0, 1], gray replicated
/// across channels — the same convention the dataset loader uses.
pub fn image_tensor(path: &Path, channels: usize) -> anyhow::Result<Tensor> {
    let img = pgm::read(path).with_context(|| format!("cannot load `{}`", path.display()))?;
    let plane: Vec<f64> = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let mut data = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor::new(&[channels, img.height, img.width], data))
}

pub fn parse_split(s: &str) -> anyhow::Result<Split> {
    s.parse().map_err(|()| anyhow::anyhow!("unknown split `{s}` (expected train, val, or test)"))
}
