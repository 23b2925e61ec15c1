//! Token embedding with sinusoidal positions, the gated feedforward network,
//! and the pre-normalized encoder stack.
//!
//! Every block is `x + dropout(sublayer(RMSNorm(x)))`, so zero-initialized
//! sublayer weights make a block the exact identity; the stack ends with one
//! final RMSNorm.

use crate::attention;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_ones, init_weight, ParamStore};
use crate::session::Session;
use crate::tensor::ValueId;

/// Row-major `max_len x d_model` sinusoidal table: even columns carry
/// `sin(pos / 10000^(c/d))`, odd columns the matching cosine, so row 0 is
/// `[0, 1, 0, 1, ...]`.
pub fn positional_table(max_len: usize, d_model: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for c in 0..d_model {
            let pair = (c / 2) as f64;
            let freq = 1.0 / 1e4_f64.powf(2.0 * pair / d_model as f64);
            let angle = pos as f64 * freq;
            table[pos * d_model + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Register the shared token embedding table.
pub fn register_embedding(cfg: &ModelConfig, seed: u64, params: &mut ParamStore) {
    init_weight(params, seed, "embed.table", &[cfg.vocab_size, cfg.d_model]);
}

/// Look up token embeddings, scale by sqrt(d_model), and add sinusoidal
/// positions for rows `0..s_t`.
pub fn embed_report(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<ValueId> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Contract(format!(
            "sequence of {} tokens exceeds max length {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let table = sess.param(params, "embed.table");
    let emb = sess.tape.embedding(table, tokens);
    let scaled = sess.tape.affine_scalar(emb, (cfg.d_model as f64).sqrt(), 0.0);
    let pe_rows: Vec<f64> = positional_table(tokens.len(), cfg.d_model);
    let pe = sess.tape.constant(pe_rows, &[tokens.len(), cfg.d_model]);
    Ok(sess.tape.add(scaled, pe))
}

/// Register one gated FFN's three weight matrices under `prefix`.
pub fn register_ffn(cfg: &ModelConfig, seed: u64, params: &mut ParamStore, prefix: &str) {
    init_weight(params, seed, &format!("{prefix}.w1"), &[cfg.d_model, cfg.d_ff]);
    init_weight(params, seed, &format!("{prefix}.w3"), &[cfg.d_model, cfg.d_ff]);
    init_weight(params, seed, &format!("{prefix}.w2"), &[cfg.d_ff, cfg.d_model]);
}

/// `(act(x W1) ⊙ (x W3)) W2` with the configured activation.
pub fn gated_ffn(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: ValueId,
) -> ValueId {
    let w1 = sess.param(params, &format!("{prefix}.w1"));
    let w3 = sess.param(params, &format!("{prefix}.w3"));
    let w2 = sess.param(params, &format!("{prefix}.w2"));
    let gate_in = sess.tape.matmul(x, w1);
    let gate = match cfg.activation {
        crate::config::Activation::Silu => sess.tape.silu(gate_in),
        crate::config::Activation::Gelu => sess.tape.gelu(gate_in),
    };
    let value = sess.tape.matmul(x, w3);
    let prod = sess.tape.mul(gate, value);
    sess.tape.matmul(prod, w2)
}

/// Register the full encoder stack (blocks plus final norm).
pub fn register_encoder(cfg: &ModelConfig, seed: u64, params: &mut ParamStore) {
    for l in 0..cfg.n_enc {
        let p = format!("enc.{l}");
        attention::register_params(cfg, seed, params, &format!("{p}.attn"));
        init_ones(params, &format!("{p}.attn_norm.gain"), cfg.d_model);
        register_ffn(cfg, seed, params, &format!("{p}.ffn"));
        init_ones(params, &format!("{p}.ffn_norm.gain"), cfg.d_model);
    }
    init_ones(params, "enc.final_norm.gain", cfg.d_model);
}

/// One pre-norm encoder block: self-attention then gated FFN, each behind a
/// RMSNorm and a residual, with block dropout on the sublayer outputs.
pub fn encoder_block(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    x: ValueId,
    positions: &[usize],
) -> ValueId {
    let p = format!("enc.{layer}");
    let gain = sess.param(params, &format!("{p}.attn_norm.gain"));
    let normed = sess.tape.rmsnorm(x, gain, cfg.rms_eps);
    let att = attention::mdla(
        sess,
        params,
        cfg,
        &format!("{p}.attn"),
        &format!("enc.{layer}.self"),
        normed,
        normed,
        positions,
        positions,
        false,
    );
    let att = sess.dropout(att, cfg.block_dropout);
    let h = sess.tape.add(att, x);

    let gain = sess.param(params, &format!("{p}.ffn_norm.gain"));
    let normed = sess.tape.rmsnorm(h, gain, cfg.rms_eps);
    let f = gated_ffn(sess, params, cfg, &format!("{p}.ffn"), normed);
    let f = sess.dropout(f, cfg.block_dropout);
    sess.tape.add(f, h)
}

/// The full encoder: `n_enc` blocks over the patch sequence, then a final
/// RMSNorm.
pub fn encoder_stack(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    patches: ValueId,
    positions: &[usize],
) -> Result<ValueId> {
    if cfg.n_enc == 0 {
        return Err(Error::Config("encoder depth must be at least 1".into()));
    }
    let mut x = patches;
    for l in 0..cfg.n_enc {
        x = encoder_block(sess, params, cfg, l, x, positions);
    }
    let gain = sess.param(params, "enc.final_norm.gain");
    Ok(sess.tape.rmsnorm(x, gain, cfg.rms_eps))
}
