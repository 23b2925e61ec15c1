//! A small, dependency-light vision-language captioning stack in pure Rust:
//! a multiscale CNN image encoder, a transformer decoder with dual-branch
//! latent attention, gated cross-modal fusion, and a sparse mixture-of-experts
//! feed-forward layer — plus the training loop, beam-search decoding, n-gram
//! metrics, and a binary checkpoint format. Everything runs on f64 and is
//! bitwise deterministic for a fixed seed.

pub mod artifacts;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod session;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vision;

pub use config::{Activation, ModelConfig, VisionConfig};
pub use error::{Error, Result};
pub use params::{BufStore, ParamStore};
pub use session::{Phase, Session};
pub use tensor::{Tape, Tensor, ValueId};
