//! Dataset plumbing: vocabulary, synthetic corpus generation, PGM image
//! files, and the on-disk dataset loader.

pub mod dataset;
pub mod pgm;
pub mod synth;
pub mod vocab;
