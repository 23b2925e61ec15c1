//! Gated cross-modal fusion: text tokens cross-attend into image patches,
//! a pooled global-context row summarizes the image, and a sigmoid gate
//! interpolates per channel between the attended image view and the text
//! view before a final affine merge.

use crate::attention;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_ones, init_weight, init_zeros, ParamStore};
use crate::session::Session;
use crate::tensor::ValueId;

/// Intermediate values of one fusion pass, exposed for tests and tracing;
/// `z` is the block output.
#[derive(Debug, Clone, Copy)]
pub struct FusionParts {
    /// RMS-normalized text input.
    pub x_norm: ValueId,
    /// RMS-normalized image input.
    pub i_norm: ValueId,
    /// Cross-attended image context with the raw-text residual.
    pub i_att: ValueId,
    /// RMS-normalized `i_att`, the gate's image-side endpoint.
    pub rn_att: ValueId,
    /// Pooled global context row (`1 x d_model`).
    pub ctx: ValueId,
    /// Sigmoid gate values in `(0,1)`, one per token and channel.
    pub gate: ValueId,
    /// Fused output (`s_t x d_model`).
    pub z: ValueId,
}

/// Register one fusion block's parameters under `prefix`.
pub fn register_params(cfg: &ModelConfig, seed: u64, params: &mut ParamStore, prefix: &str) {
    let d = cfg.d_model;
    init_ones(params, &format!("{prefix}.txt_norm.gain"), d);
    init_ones(params, &format!("{prefix}.img_norm.gain"), d);
    attention::register_params(cfg, seed, params, &format!("{prefix}.cross_attn"));
    init_ones(params, &format!("{prefix}.att_norm.gain"), d);
    init_weight(params, seed, &format!("{prefix}.ctx.w"), &[2 * d, d]);
    init_zeros(params, &format!("{prefix}.ctx.b"), d);
    init_weight(params, seed, &format!("{prefix}.gate1.w"), &[2 * d, d]);
    init_zeros(params, &format!("{prefix}.gate1.b"), d);
    init_weight(params, seed, &format!("{prefix}.gate2.w"), &[d, d]);
    init_zeros(params, &format!("{prefix}.gate2.b"), d);
    init_weight(params, seed, &format!("{prefix}.fusion.w"), &[3 * d, d]);
    init_zeros(params, &format!("{prefix}.fusion.b"), d);
}

fn affine(
    sess: &mut Session,
    params: &ParamStore,
    prefix: &str,
    x: ValueId,
) -> ValueId {
    let w = sess.param(params, &format!("{prefix}.w"));
    let b = sess.param(params, &format!("{prefix}.b"));
    let y = sess.tape.matmul(x, w);
    sess.tape.add_row(y, b)
}

/// One gated-fusion pass. `x` is the token stream (`s_t x d_model`), `img`
/// the image patch sequence (`s_i x d_model`); `x_positions` are the token
/// positions for the cross-attention rotary branch (patches use grid order).
pub fn gated_fusion(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    scope: &str,
    x: ValueId,
    img: ValueId,
    x_positions: &[usize],
) -> Result<FusionParts> {
    let s_t = sess.tape.shape(x)[0];
    let s_i = sess.tape.shape(img)[0];
    if s_i == 0 {
        return Err(Error::Contract(
            "gated fusion needs at least one image patch (pooling is undefined on none)".into(),
        ));
    }

    let gain = sess.param(params, &format!("{prefix}.txt_norm.gain"));
    let x_norm = sess.tape.rmsnorm(x, gain, cfg.rms_eps);
    let gain = sess.param(params, &format!("{prefix}.img_norm.gain"));
    let i_norm = sess.tape.rmsnorm(img, gain, cfg.rms_eps);

    // normalized tokens query the normalized patches; residual adds raw x
    let patch_positions: Vec<usize> = (0..s_i).collect();
    let att = attention::mdla(
        sess,
        params,
        cfg,
        &format!("{prefix}.cross_attn"),
        scope,
        x_norm,
        i_norm,
        x_positions,
        &patch_positions,
        false,
    );
    let i_att = sess.tape.add(att, x);

    // global context: mean- and max-pooled image rows, projected to one row
    let mean = sess.tape.mean_rows(i_norm);
    let max = sess.tape.max_rows(i_norm);
    let pooled = sess.tape.concat_cols(&[mean, max]);
    let ctx = affine(sess, params, &format!("{prefix}.ctx"), pooled);
    let ones = sess.tape.constant(vec![1.0; s_t], &[s_t, 1]);
    let ctx_rows = sess.tape.matmul(ones, ctx);

    // per-channel sigmoid gate from the attended and text views
    let gain = sess.param(params, &format!("{prefix}.att_norm.gain"));
    let rn_att = sess.tape.rmsnorm(i_att, gain, cfg.rms_eps);
    let gate_in = sess.tape.concat_cols(&[rn_att, x_norm]);
    let hidden = affine(sess, params, &format!("{prefix}.gate1"), gate_in);
    let hidden = match cfg.activation {
        crate::config::Activation::Silu => sess.tape.silu(hidden),
        crate::config::Activation::Gelu => sess.tape.gelu(hidden),
    };
    let logits = affine(sess, params, &format!("{prefix}.gate2"), hidden);
    let gate = sess.tape.sigmoid(logits);

    // convex blend, then the affine merge with an attended-context residual
    let gated_img = sess.tape.mul(gate, rn_att);
    let inv_gate = sess.tape.affine_scalar(gate, -1.0, 1.0);
    let gated_txt = sess.tape.mul(inv_gate, x_norm);
    let f_gated = sess.tape.add(gated_img, gated_txt);

    let merged_in = sess.tape.concat_cols(&[f_gated, i_att, ctx_rows]);
    let merged = affine(sess, params, &format!("{prefix}.fusion"), merged_in);
    let z = sess.tape.add(merged, i_att);

    Ok(FusionParts {
        x_norm,
        i_norm,
        i_att,
        rn_att,
        ctx,
        gate,
        z,
    })
}
