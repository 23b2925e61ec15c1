//! Model hyperparameters. The defaults are the full-scale reference
//! configuration; the test and desk setups shrink them via JSON configs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Silu => write!(f, "silu"),
            Activation::Gelu => write!(f, "gelu"),
        }
    }
}

/// Vision-encoder hyperparameters. The backbone downsamples by 4, 2, 2, 2
/// across four stages with channel widths `c, 2c, 4c, 8c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub in_channels: usize,
    /// Stage-1 channel width `c`.
    pub base_channels: usize,
    /// Residual blocks after each stage's downsampling unit.
    pub blocks_per_stage: usize,
    /// Common channel width the per-stage 1x1 lateral convs project to.
    pub d_pyramid: usize,
    /// Channel width of the fused map (output of the 3x3 fusion conv).
    pub d_fused: usize,
    /// The fused map is adaptively average-pooled to `grid x grid` patches.
    pub grid: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Ablation switch: skip the pyramid and fuse only the deepest stage.
    pub single_scale: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            in_channels: 3,
            base_channels: 256,
            blocks_per_stage: 1,
            d_pyramid: 256,
            d_fused: 2048,
            grid: 7,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            single_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Width of the shared attention latent space (all heads together).
    pub d_latent: usize,
    pub heads: usize,
    /// Per-head width of the position-free attention branch.
    pub d_nope: usize,
    /// Per-head width of the rotary attention branch (must be even).
    pub d_rope: usize,
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Weight of the router load-balance term in the total loss.
    pub alpha: f64,
    /// Total vocabulary size including the four reserved tokens.
    pub vocab_size: usize,
    /// Maximum report length including the start and end markers.
    pub max_len: usize,
    pub activation: Activation,
    pub attn_dropout: f64,
    pub block_dropout: f64,
    pub rope_base: f64,
    pub rms_eps: f64,
    pub vision: VisionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            d_latent: 768,
            heads: 8,
            d_nope: 48,
            d_rope: 48,
            d_ff: 2048,
            n_enc: 3,
            n_dec: 3,
            experts: 8,
            top_k: 2,
            alpha: 0.01,
            vocab_size: 0,
            max_len: 60,
            activation: Activation::Silu,
            attn_dropout: 0.12,
            block_dropout: 0.1,
            rope_base: 10_000.0,
            rms_eps: 1e-6,
            vision: VisionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Validate every field and report all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        check(self.d_model > 0, format!("d_model must be positive, got {}", self.d_model));
        check(self.heads > 0, format!("heads must be positive, got {}", self.heads));
        check(self.d_latent > 0, format!("d_latent must be positive, got {}", self.d_latent));
        if self.heads > 0 {
            check(
                self.d_model % self.heads == 0,
                format!("d_model {} must be divisible by heads {}", self.d_model, self.heads),
            );
            check(
                self.d_latent % self.heads == 0,
                format!("d_latent {} must be divisible by heads {}", self.d_latent, self.heads),
            );
            if self.d_latent % self.heads == 0 {
                let per_head = self.d_latent / self.heads;
                check(
                    self.d_nope + self.d_rope == per_head,
                    format!(
                        "d_nope {} + d_rope {} must equal the per-head width {per_head}",
                        self.d_nope, self.d_rope
                    ),
                );
            }
        }
        check(self.d_rope % 2 == 0, format!("d_rope must be even, got {}", self.d_rope));
        check(self.d_ff > 0, format!("d_ff must be positive, got {}", self.d_ff));
        check(self.n_enc > 0, format!("n_enc must be positive, got {}", self.n_enc));
        check(self.n_dec > 0, format!("n_dec must be positive, got {}", self.n_dec));
        check(self.experts > 0, format!("experts must be positive, got {}", self.experts));
        check(
            self.top_k >= 1 && self.top_k <= self.experts,
            format!("top_k {} must lie in 1..={}", self.top_k, self.experts),
        );
        check(self.alpha >= 0.0, format!("alpha must be non-negative, got {}", self.alpha));
        check(
            self.vocab_size > 4,
            format!("vocab_size {} must exceed the 4 reserved tokens", self.vocab_size),
        );
        check(self.max_len >= 3, format!("max_len {} must be at least 3", self.max_len));
        for (name, rate) in [("attn_dropout", self.attn_dropout), ("block_dropout", self.block_dropout)] {
            check(
                (0.0..1.0).contains(&rate),
                format!("{name} {rate} must lie in [0, 1)"),
            );
        }
        check(self.rope_base > 1.0, format!("rope_base {} must exceed 1", self.rope_base));
        check(self.rms_eps > 0.0, format!("rms_eps {} must be positive", self.rms_eps));

        let v = &self.vision;
        check(v.in_channels > 0, format!("vision.in_channels must be positive, got {}", v.in_channels));
        check(v.base_channels > 0, format!("vision.base_channels must be positive, got {}", v.base_channels));
        check(
            v.blocks_per_stage > 0,
            format!("vision.blocks_per_stage must be positive, got {}", v.blocks_per_stage),
        );
        check(v.d_pyramid > 0, format!("vision.d_pyramid must be positive, got {}", v.d_pyramid));
        check(v.d_fused > 0, format!("vision.d_fused must be positive, got {}", v.d_fused));
        check(v.grid > 0, format!("vision.grid must be positive, got {}", v.grid));
        check(
            v.bn_momentum > 0.0 && v.bn_momentum <= 1.0,
            format!("vision.bn_momentum {} must lie in (0, 1]", v.bn_momentum),
        );
        check(v.bn_eps > 0.0, format!("vision.bn_eps {} must be positive", v.bn_eps));

        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Per-head attention width.
    pub fn head_width(&self) -> usize {
        self.d_latent / self.heads
    }

    /// Patch count produced by the vision encoder for a legal input.
    pub fn patch_count(&self) -> usize {
        self.vision.grid * self.vision.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_once_vocab_is_set() {
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 100;
        cfg.validate().expect("reference config must validate");
        assert_eq!(cfg.head_width(), 96);
        assert_eq!(cfg.d_nope + cfg.d_rope, 96);
    }

    #[test]
    fn validation_reports_every_bad_field() {
        let cfg = ModelConfig {
            d_model: 0,
            top_k: 9,
            attn_dropout: 1.5,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        for needle in ["d_model", "top_k", "attn_dropout", "vocab_size"] {
            assert!(err.contains(needle), "error should mention `{needle}`: {err}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 321;
        cfg.activation = Activation::Gelu;
        cfg.vision.single_scale = true;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back, "serialize/deserialize must be lossless");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{ "d_model": 64, "frobnicate": 3 }"#;
        let err = serde_json::from_str::<ModelConfig>(text).unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "unknown key must be named: {err}");
    }
}
