//! Multiscale vision encoder: a four-stage CNN backbone, a top-down feature
//! pyramid, cross-scale fusion, and patch projection into the text width.
//!
//! Stage strides are 4, 2, 2, 2 with channel widths `c, 2c, 4c, 8c`, so legal
//! inputs have height and width divisible by 32. The pyramid maps every stage
//! to a common width with 1x1 conv + BN + ReLU and accumulates top-down via
//! nearest-neighbor upsampling; the fusion conv (3x3 + BN + ReLU) runs at the
//! highest-resolution level. The fused map is adaptively average-pooled to a
//! `grid x grid` patch grid, RMS-normalized, and linearly projected.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_ones, init_weight, init_zeros, BufStore, ParamStore};
use crate::session::Session;
use crate::tensor::{Tensor, ValueId};

/// Total backbone downsampling factor.
pub const STRIDE_TOTAL: usize = 32;

fn register_bn(params: &mut ParamStore, bufs: &mut BufStore, prefix: &str, ch: usize) {
    init_ones(params, &format!("{prefix}.gamma"), ch);
    init_zeros(params, &format!("{prefix}.beta"), ch);
    bufs.register(&format!("{prefix}.running_mean"), Tensor::zeros(&[ch]));
    bufs.register(&format!("{prefix}.running_var"), Tensor::full(&[ch], 1.0));
}

fn bottleneck_mid(ch: usize) -> usize {
    (ch / 4).max(1)
}

/// Register every vision parameter and buffer under the `msve.` prefix.
pub fn register_params(cfg: &ModelConfig, seed: u64, params: &mut ParamStore, bufs: &mut BufStore) {
    let v = &cfg.vision;
    let widths = stage_widths(v.base_channels);

    // backbone: per stage, a downsampling unit then residual bottleneck blocks
    let mut prev = v.in_channels;
    for (i, &ch) in widths.iter().enumerate() {
        let stage = format!("msve.backbone.stage{}", i + 1);
        let downs = if i == 0 { 2 } else { 1 }; // stage 1 realizes stride 4 as two stride-2 convs
        for d in 0..downs {
            let p = format!("{stage}.down{d}");
            let cin = if d == 0 { prev } else { ch };
            init_weight(params, seed, &format!("{p}.conv.w"), &[ch, cin, 3, 3]);
            register_bn(params, bufs, &format!("{p}.bn"), ch);
        }
        for b in 0..v.blocks_per_stage {
            let p = format!("{stage}.block{b}");
            let mid = bottleneck_mid(ch);
            init_weight(params, seed, &format!("{p}.conv1.conv.w"), &[mid, ch, 1, 1]);
            register_bn(params, bufs, &format!("{p}.conv1.bn"), mid);
            init_weight(params, seed, &format!("{p}.conv2.conv.w"), &[mid, mid, 3, 3]);
            register_bn(params, bufs, &format!("{p}.conv2.bn"), mid);
            init_weight(params, seed, &format!("{p}.conv3.conv.w"), &[ch, mid, 1, 1]);
            register_bn(params, bufs, &format!("{p}.conv3.bn"), ch);
        }
        prev = ch;
    }

    // lateral convs: all four stages in multiscale mode, only the deepest in
    // the single-scale ablation
    let lo = if v.single_scale { 3 } else { 0 };
    for (i, &ch) in widths.iter().enumerate().skip(lo) {
        let p = format!("msve.pyramid.phi{}", i + 2);
        init_weight(params, seed, &format!("{p}.conv.w"), &[v.d_pyramid, ch, 1, 1]);
        register_bn(params, bufs, &format!("{p}.bn"), v.d_pyramid);
    }

    // fusion conv and patch projection
    init_weight(params, seed, "msve.fuse.psi.conv.w", &[v.d_fused, v.d_pyramid, 3, 3]);
    register_bn(params, bufs, "msve.fuse.psi.bn", v.d_fused);
    init_ones(params, "msve.proj.norm.gain", v.d_fused);
    init_weight(params, seed, "msve.proj.w", &[v.d_fused, cfg.d_model]);
    init_zeros(params, "msve.proj.b", cfg.d_model);
}

fn stage_widths(c: usize) -> [usize; 4] {
    [c, 2 * c, 4 * c, 8 * c]
}

fn conv_bn(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: ValueId,
    stride: usize,
    padding: usize,
    relu: bool,
) -> ValueId {
    let w = sess.param(params, &format!("{prefix}.conv.w"));
    let y = sess.tape.conv2d(x, w, stride, padding);
    let y = sess.batchnorm(
        params,
        bufs,
        &format!("{prefix}.bn"),
        y,
        cfg.vision.bn_momentum,
        cfg.vision.bn_eps,
    );
    if relu {
        sess.tape.relu(y)
    } else {
        y
    }
}

fn residual_block(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    prefix: &str,
    x: ValueId,
) -> ValueId {
    let h = conv_bn(sess, params, bufs, cfg, &format!("{prefix}.conv1"), x, 1, 0, true);
    let h = conv_bn(sess, params, bufs, cfg, &format!("{prefix}.conv2"), h, 1, 1, true);
    let h = conv_bn(sess, params, bufs, cfg, &format!("{prefix}.conv3"), h, 1, 0, false);
    let sum = sess.tape.add(h, x);
    sess.tape.relu(sum)
}

/// Patch embedding produced by [`encode`].
#[derive(Debug, Clone, Copy)]
pub struct VisionOutput {
    /// `grid*grid x d_model` patch embeddings.
    pub patches: ValueId,
    /// Side length of the pooled patch grid actually used.
    pub grid: usize,
}

/// Backbone stage outputs `[C2, C3, C4, C5]` at strides 4, 8, 16, 32.
pub fn backbone(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    image: ValueId,
) -> Vec<ValueId> {
    let v = &cfg.vision;
    let mut feats = Vec::with_capacity(4);
    let mut x = image;
    for (i, _) in stage_widths(v.base_channels).iter().enumerate() {
        let stage = format!("msve.backbone.stage{}", i + 1);
        let downs = if i == 0 { 2 } else { 1 };
        for d in 0..downs {
            x = conv_bn(sess, params, bufs, cfg, &format!("{stage}.down{d}"), x, 2, 1, true);
        }
        for b in 0..v.blocks_per_stage {
            x = residual_block(sess, params, bufs, cfg, &format!("{stage}.block{b}"), x);
        }
        feats.push(x);
    }
    feats
}

fn phi(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    level: usize,
    x: ValueId,
) -> ValueId {
    conv_bn(sess, params, bufs, cfg, &format!("msve.pyramid.phi{level}"), x, 1, 0, true)
}

/// Upsample `src` to the spatial size of `like` (nearest neighbor).
fn lambda_up(sess: &mut Session, src: ValueId, like: ValueId) -> ValueId {
    let shape = sess.tape.shape(like);
    let (h, w) = (shape[1], shape[2]);
    sess.tape.upsample_nearest(src, h, w)
}

/// Top-down pyramid `[P2, P3, P4, P5]` from backbone stages `[C2..C5]`:
/// `P5 = phi5(C5)`, `P_i = phi_i(C_i) + upsample(P_{i+1})`.
pub fn pyramid(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    feats: &[ValueId],
) -> Vec<ValueId> {
    assert_eq!(feats.len(), 4, "pyramid expects the four backbone stages");
    let p5 = phi(sess, params, bufs, cfg, 5, feats[3]);
    let mut levels = vec![p5];
    for (level, c) in [(4usize, feats[2]), (3, feats[1]), (2, feats[0])] {
        let lateral = phi(sess, params, bufs, cfg, level, c);
        let top = lambda_up(sess, *levels.last().unwrap(), c);
        levels.push(sess.tape.add(lateral, top));
    }
    levels.reverse(); // [P2, P3, P4, P5]
    levels
}

/// Cross-scale fusion: sum every level upsampled to P2 resolution, then the
/// 3x3 fusion conv.
pub fn fuse(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    levels: &[ValueId],
) -> ValueId {
    let p2 = levels[0];
    let mut acc = p2;
    for &p in &levels[1..] {
        let up = lambda_up(sess, p, p2);
        acc = sess.tape.add(acc, up);
    }
    conv_bn(sess, params, bufs, cfg, "msve.fuse.psi", acc, 1, 1, true)
}

/// Pool the fused map to the patch grid and project each patch to `d_model`.
pub fn patchify(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    fused: ValueId,
    grid: usize,
) -> ValueId {
    let d_fused = sess.tape.shape(fused)[0];
    let pooled = sess.tape.adaptive_avg_pool(fused, grid);
    let flat = sess.tape.reshape(pooled, &[d_fused, grid * grid]);
    let rows = sess.tape.transpose(flat); // one row per patch, channels as columns
    let gain = sess.param(params, "msve.proj.norm.gain");
    let normed = sess.tape.rmsnorm(rows, gain, cfg.rms_eps);
    let w = sess.param(params, "msve.proj.w");
    let b = sess.param(params, "msve.proj.b");
    let proj = sess.tape.matmul(normed, w);
    sess.tape.add_row(proj, b)
}

/// Full vision encoder: image `[in_channels, H, W]` to patch embeddings.
pub fn encode(
    sess: &mut Session,
    params: &ParamStore,
    bufs: &mut BufStore,
    cfg: &ModelConfig,
    image: ValueId,
) -> Result<VisionOutput> {
    let v = &cfg.vision;
    let shape = sess.tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != v.in_channels {
        return Err(Error::Contract(format!(
            "image must be [{}, H, W], got {shape:?}",
            v.in_channels
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % STRIDE_TOTAL != 0 || w % STRIDE_TOTAL != 0 || h == 0 || w == 0 {
        return Err(Error::Contract(format!(
            "image sides must be positive multiples of {STRIDE_TOTAL}, got {h}x{w}"
        )));
    }

    let feats = backbone(sess, params, bufs, cfg, image);
    let (fused, spatial) = if v.single_scale {
        // ablation: only the deepest stage, no top-down path
        let p5 = phi(sess, params, bufs, cfg, 5, feats[3]);
        let fused = conv_bn(sess, params, bufs, cfg, "msve.fuse.psi", p5, 1, 1, true);
        (fused, h / STRIDE_TOTAL)
    } else {
        let levels = pyramid(sess, params, bufs, cfg, &feats);
        let fused = fuse(sess, params, bufs, cfg, &levels);
        (fused, h / 4)
    };

    let grid = if v.single_scale {
        // the deepest map may be smaller than the configured grid
        v.grid.min(spatial)
    } else if v.grid > spatial {
        return Err(Error::Contract(format!(
            "patch grid {} exceeds fused map size {spatial}",
            v.grid
        )));
    } else {
        v.grid
    };

    let patches = patchify(sess, params, cfg, fused, grid);
    Ok(VisionOutput { patches, grid })
}
