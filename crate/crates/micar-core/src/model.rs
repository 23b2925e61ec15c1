//! The assembled captioning model. An image runs through the multiscale
//! vision encoder and a transformer encoder over its patches; the caption
//! runs through a decoder whose layers chain causal self-attention, gated
//! cross-modal fusion against the patches, and a mixture-of-experts
//! feedforward; a linear head maps the result to vocabulary logits for
//! teacher-forced next-token prediction.

use crate::attention;
use crate::config::ModelConfig;
use crate::data::vocab::{PAD, SOS};
use crate::error::{Error, Result};
use crate::fusion;
use crate::moe;
use crate::params::{self, BufStore, ParamStore};
use crate::session::Session;
use crate::tensor::{Tensor, ValueId};
use crate::transformer;
use crate::vision;

/// Register every parameter and running buffer of the full model.
pub fn register_params(cfg: &ModelConfig, seed: u64) -> (ParamStore, BufStore) {
    let mut p = ParamStore::new();
    let mut b = BufStore::new();
    vision::register_params(cfg, seed, &mut p, &mut b);
    transformer::register_embedding(cfg, seed, &mut p);
    transformer::register_encoder(cfg, seed, &mut p);
    for l in 0..cfg.n_dec {
        let pre = format!("dec.{l}");
        params::init_ones(&mut p, &format!("{pre}.sa_norm.gain"), cfg.d_model);
        attention::register_params(cfg, seed, &mut p, &format!("{pre}.self_attn"));
        fusion::register_params(cfg, seed, &mut p, &format!("{pre}.gf"));
        params::init_ones(&mut p, &format!("{pre}.moe_norm.gain"), cfg.d_model);
        moe::register_params(cfg, seed, &mut p, &format!("{pre}.moe"));
    }
    params::init_ones(&mut p, "dec.final_norm.gain", cfg.d_model);
    params::init_weight(&mut p, seed, "head.w", &[cfg.d_model, cfg.vocab_size]);
    params::init_zeros(&mut p, "head.b", cfg.vocab_size);
    (p, b)
}

/// One decoder layer: three pre-norm residual sublayers — causal
/// self-attention, gated fusion against the image patches, and the
/// mixture-of-experts feedforward. Returns the layer output together with
/// the layer's router load-balance penalty.
pub fn decoder_block(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    x: ValueId,
    img: ValueId,
    positions: &[usize],
) -> Result<(ValueId, ValueId)> {
    let p = format!("dec.{layer}");

    let gain = sess.param(params, &format!("{p}.sa_norm.gain"));
    let normed = sess.tape.rmsnorm(x, gain, cfg.rms_eps);
    let att = attention::mdla(
        sess,
        params,
        cfg,
        &format!("{p}.self_attn"),
        &format!("dec.{layer}.self"),
        normed,
        normed,
        positions,
        positions,
        true,
    );
    let att = sess.dropout(att, cfg.block_dropout);
    let h_sa = sess.tape.add(att, x);

    // the fusion output already carries its internal cross-attention
    // residual; the block adds the sublayer residual on top
    let parts = fusion::gated_fusion(
        sess,
        params,
        cfg,
        &format!("{p}.gf"),
        &format!("dec.{layer}.cross"),
        h_sa,
        img,
        positions,
    )?;
    let fused = sess.dropout(parts.z, cfg.block_dropout);
    let h_gf = sess.tape.add(fused, h_sa);

    let gain = sess.param(params, &format!("{p}.moe_norm.gain"));
    let normed = sess.tape.rmsnorm(h_gf, gain, cfg.rms_eps);
    let out = moe::moe_forward(sess, params, cfg, &format!("{p}.moe"), &format!("dec.{layer}.moe"), normed);
    let y = sess.dropout(out.y, cfg.block_dropout);
    let h_moe = sess.tape.add(y, h_gf);

    Ok((h_moe, out.load_balance))
}

/// Everything one forward pass produces besides the tape itself.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[s_t, vocab_size]` next-token logits; row `t` predicts token `t+1`.
    pub logits: ValueId,
    /// One router load-balance penalty per decoder layer.
    pub load_balance: Vec<ValueId>,
    /// Side length of the patch grid the vision encoder actually used.
    pub grid: usize,
}

/// Encode the image and run the patch encoder; returns the `[s_i, d_model]`
/// patch sequence the decoder fuses against. Split out so generation can
/// run it once per image and reuse the values across beam steps.
pub fn encode_image(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<(ValueId, usize)> {
    let img_leaf = sess.tape.leaf_tensor(image, false);
    let vis = vision::encode(sess, params, bufs, cfg, img_leaf)?;
    let s_i = sess.tape.shape(vis.patches)[0];
    let patch_positions: Vec<usize> = (0..s_i).collect();
    let encoded = transformer::encoder_stack(sess, params, cfg, vis.patches, &patch_positions)?;
    Ok((encoded, vis.grid))
}

/// Decode a token prefix against already-encoded image patches.
pub fn decode_tokens(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    img_encoded: ValueId,
    tokens: &[usize],
) -> Result<ForwardOut> {
    if tokens.is_empty() {
        return Err(Error::Contract(
            "token sequence is empty; the decoder needs at least <sos>".into(),
        ));
    }
    if tokens[0] != SOS {
        return Err(Error::Contract(format!(
            "token sequence must start with <sos> (id {SOS}), got id {}",
            tokens[0]
        )));
    }
    let emb = transformer::embed_report(sess, params, cfg, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();

    let mut x = emb;
    let mut load_balance = Vec::with_capacity(cfg.n_dec);
    for l in 0..cfg.n_dec {
        let (next, lb) = decoder_block(sess, params, cfg, l, x, img_encoded, &positions)?;
        x = next;
        load_balance.push(lb);
    }

    let gain = sess.param(params, "dec.final_norm.gain");
    let h = sess.tape.rmsnorm(x, gain, cfg.rms_eps);
    let w = sess.param(params, "head.w");
    let b = sess.param(params, "head.b");
    let proj = sess.tape.matmul(h, w);
    let logits = sess.tape.add_row(proj, b);

    Ok(ForwardOut { logits, load_balance, grid: 0 })
}

/// Full teacher-forced pass: image and `<sos>`-prefixed tokens to logits.
pub fn forward(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    image: &Tensor,
    tokens: &[usize],
) -> Result<ForwardOut> {
    let (img_encoded, grid) = encode_image(sess, params, bufs, cfg, image)?;
    let mut out = decode_tokens(sess, params, cfg, img_encoded, tokens)?;
    out.grid = grid;
    Ok(out)
}

/// The loss terms of one pass. `total` is what training differentiates.
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: ValueId,
    /// Summed next-token cross-entropy over the non-pad target positions.
    pub lang: ValueId,
    /// Mean router load-balance penalty across decoder layers.
    pub balance: ValueId,
    /// How many target positions the language loss summed over.
    pub active: usize,
}

/// Teacher-forced objective: `lang + alpha * balance`, where `targets[t]`
/// is the token that should follow position `t` and `<pad>` targets are
/// excluded from the language term.
pub fn total_loss(
    sess: &mut Session,
    cfg: &ModelConfig,
    logits: ValueId,
    targets: &[usize],
    load_balance: &[ValueId],
) -> Result<Losses> {
    let rows = sess.tape.shape(logits)[0];
    if targets.len() != rows {
        return Err(Error::Contract(format!(
            "{rows} logit rows but {} targets",
            targets.len()
        )));
    }
    let active: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Err(Error::Contract(
            "every target position is padding; the language loss is undefined".into(),
        ));
    }
    assert!(
        !load_balance.is_empty(),
        "the decoder must report at least one load-balance penalty"
    );

    let lang = sess.tape.cross_entropy_sum(logits, targets, &active);
    let mut acc = load_balance[0];
    for &lb in &load_balance[1..] {
        acc = sess.tape.add(acc, lb);
    }
    let balance = sess.tape.affine_scalar(acc, 1.0 / load_balance.len() as f64, 0.0);
    let total = if cfg.alpha == 0.0 {
        lang
    } else {
        let scaled = sess.tape.affine_scalar(balance, cfg.alpha, 0.0);
        sess.tape.add(lang, scaled)
    };
    Ok(Losses { total, lang, balance, active: n_active })
}

/// Configuration, parameters, and running buffers bundled for the training
/// loop and the checkpoint format.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub bufs: BufStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let (params, bufs) = register_params(&cfg, seed);
        Ok(Model { cfg, params, bufs })
    }

    pub fn forward(
        &mut self,
        sess: &mut Session,
        image: &Tensor,
        tokens: &[usize],
    ) -> Result<ForwardOut> {
        forward(sess, &self.params, &mut self.bufs, &self.cfg, image, tokens)
    }
}
