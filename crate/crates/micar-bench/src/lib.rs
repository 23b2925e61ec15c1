//! Shared fixtures for the criterion benches: a model small enough to
//! iterate quickly yet exercising every code path — two heads with both
//! attention branches, expert routing, and the full vision pyramid.

use micar_core::model::Model;
use micar_core::{ModelConfig, Tensor, VisionConfig};

pub fn bench_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_latent: 16,
        heads: 2,
        d_nope: 4,
        d_rope: 4,
        d_ff: 32,
        n_enc: 1,
        n_dec: 1,
        experts: 2,
        top_k: 1,
        vocab_size: 16,
        max_len: 12,
        attn_dropout: 0.0,
        block_dropout: 0.0,
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

pub fn bench_model() -> Model {
    Model::new(bench_config(), 7).expect("the bench configuration is valid")
}

/// A fixed quasi-random image; benches need a stable input, not a pretty one.
pub fn probe_image(channels: usize, side: usize) -> Tensor {
    let data = (0..channels * side * side)
        .map(|i| ((i * 2654435761) % 977) as f64 / 976.0)
        .collect();
    Tensor::new(&[channels, side, side], data)
}
