//! Multihead dual-branch latent attention. Queries, keys, and values pass
//! through a latent bottleneck (down-projection, RMSNorm, up-projection);
//! each head's query/key then splits into a content branch and a
//! rotary-embedded branch whose scores are summed before softmax. Values are
//! unsplit. Works as causal self-attention over tokens and as cross-attention
//! from tokens onto image patches.

use crate::config::ModelConfig;
use crate::params::{init_ones, init_weight, ParamStore};
use crate::session::{AttnTrace, Session};
use crate::tensor::ValueId;

/// Additive logit for masked positions. Large enough that the masked
/// probability underflows to exactly zero after softmax's max-subtraction,
/// while keeping every derivative finite.
pub const MASK_VALUE: f64 = -1e30;

/// Register one attention layer's parameters under `prefix`.
pub fn register_params(cfg: &ModelConfig, seed: u64, params: &mut ParamStore, prefix: &str) {
    let dh = cfg.d_model / cfg.heads;
    for name in ["q", "k", "v"] {
        init_weight(params, seed, &format!("{prefix}.{name}_down.w"), &[cfg.d_model, dh]);
        init_ones(params, &format!("{prefix}.{name}_norm.gain"), dh);
        init_weight(params, seed, &format!("{prefix}.{name}_up.w"), &[dh, cfg.d_latent]);
    }
    init_weight(params, seed, &format!("{prefix}.out.w"), &[cfg.d_latent, cfg.d_model]);
}

fn project(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    which: &str,
    x: ValueId,
) -> ValueId {
    let down = sess.param(params, &format!("{prefix}.{which}_down.w"));
    let gain = sess.param(params, &format!("{prefix}.{which}_norm.gain"));
    let up = sess.param(params, &format!("{prefix}.{which}_up.w"));
    let d = sess.tape.matmul(x, down);
    let n = sess.tape.rmsnorm(d, gain, cfg.rms_eps);
    sess.tape.matmul(n, up)
}

/// One attention layer. `x_q` is `s_q x d_model`, `x_kv` is `s_kv x d_model`;
/// `q_positions` / `k_positions` feed the rotary branch (text positions for
/// tokens, row-major grid indices for image patches). `causal` masks keys
/// beyond each query's own position and requires `s_q == s_kv`.
///
/// `scope` labels captured attention maps (e.g. `dec.0.self`).
#[allow(clippy::too_many_arguments)]
pub fn mdla(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    scope: &str,
    x_q: ValueId,
    x_kv: ValueId,
    q_positions: &[usize],
    k_positions: &[usize],
    causal: bool,
) -> ValueId {
    let s_q = sess.tape.shape(x_q)[0];
    let s_kv = sess.tape.shape(x_kv)[0];
    assert_eq!(q_positions.len(), s_q, "one position per query row");
    assert_eq!(k_positions.len(), s_kv, "one position per key row");
    if causal {
        assert_eq!(s_q, s_kv, "causal masking needs square attention");
    }

    let q = project(sess, params, cfg, prefix, "q", x_q);
    let k = project(sess, params, cfg, prefix, "k", x_kv);
    let v = project(sess, params, cfg, prefix, "v", x_kv);

    let width = cfg.head_width();
    let scale = 1.0 / (cfg.d_latent as f64).sqrt();
    let mask = if causal {
        let mut m = vec![0.0; s_q * s_kv];
        for i in 0..s_q {
            for j in i + 1..s_kv {
                m[i * s_kv + j] = MASK_VALUE;
            }
        }
        Some(sess.tape.constant(m, &[s_q, s_kv]))
    } else {
        None
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let off = h * width;
        let q_n = sess.tape.slice_cols(q, off, cfg.d_nope);
        let q_r = sess.tape.slice_cols(q, off + cfg.d_nope, cfg.d_rope);
        let k_n = sess.tape.slice_cols(k, off, cfg.d_nope);
        let k_r = sess.tape.slice_cols(k, off + cfg.d_nope, cfg.d_rope);
        let v_h = sess.tape.slice_cols(v, off, width);

        let q_rot = sess.tape.rope(q_r, q_positions, cfg.rope_base);
        let k_rot = sess.tape.rope(k_r, k_positions, cfg.rope_base);
        let k_n_t = sess.tape.transpose(k_n);
        let content = sess.tape.matmul(q_n, k_n_t);
        let k_rot_t = sess.tape.transpose(k_rot);
        let rotary = sess.tape.matmul(q_rot, k_rot_t);
        let scores = sess.tape.add(content, rotary);
        let scaled = sess.tape.affine_scalar(scores, scale, 0.0);
        let logits = match mask {
            Some(m) => sess.tape.add(scaled, m),
            None => scaled,
        };
        let probs = sess.tape.softmax_rows(logits);
        if sess.capture {
            let weights = sess.tape.data(probs).to_vec();
            sess.traces.attention.push(AttnTrace {
                scope: scope.to_string(),
                head: h,
                rows: s_q,
                cols: s_kv,
                weights,
            });
        }
        let probs = sess.dropout(probs, cfg.attn_dropout);
        heads.push(sess.tape.matmul(probs, v_h));
    }

    let z = sess.tape.concat_cols(&heads);
    let w_out = sess.param(params, &format!("{prefix}.out.w"));
    sess.tape.matmul(z, w_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::session::Phase;
    use crate::tensor::Tape;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.d_model = 8;
        cfg.d_latent = 8;
        cfg.heads = 2;
        cfg.d_nope = 2;
        cfg.d_rope = 2;
        cfg
    }

    fn init(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        register_params(cfg, seed, &mut params, "attn");
        params
    }

    fn rand_rows(seed: u64, label: &str, rows: usize, cols: usize) -> Vec<f64> {
        let mut r = crate::rng::stream(seed, label, 0);
        (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    // ---- plain-f64 reference implementation (no tape) ----

    fn mat_ref(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * m + j];
                }
                out[i * m + j] = s;
            }
        }
        out
    }

    fn rmsnorm_ref(x: &[f64], gain: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..cols {
                out[i * cols + j] = row[j] * inv * gain[j];
            }
        }
        out
    }

    fn rope_ref(x: &[f64], positions: &[usize], cols: usize, base: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (i, &m) in positions.iter().enumerate() {
            for p in 0..cols / 2 {
                let theta = base.powf(-2.0 * p as f64 / cols as f64);
                let ang = m as f64 * theta;
                let (s, c) = ang.sin_cos();
                let a = x[i * cols + 2 * p];
                let b = x[i * cols + 2 * p + 1];
                out[i * cols + 2 * p] = a * c - b * s;
                out[i * cols + 2 * p + 1] = a * s + b * c;
            }
        }
        out
    }

    fn softmax_row_ref(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// Naive per-head double-loop attention over raw weight matrices.
    fn mdla_ref(
        cfg: &ModelConfig,
        params: &ParamStore,
        x_q: &[f64],
        x_kv: &[f64],
        s_q: usize,
        s_kv: usize,
        q_pos: &[usize],
        k_pos: &[usize],
        causal: bool,
    ) -> Vec<f64> {
        let dh = cfg.d_model / cfg.heads;
        let proj = |x: &[f64], s: usize, which: &str| -> Vec<f64> {
            let down = &params.get(&format!("attn.{which}_down.w")).data;
            let gain = &params.get(&format!("attn.{which}_norm.gain")).data;
            let up = &params.get(&format!("attn.{which}_up.w")).data;
            let d = mat_ref(x, down, s, cfg.d_model, dh);
            let n = rmsnorm_ref(&d, gain, s, dh, cfg.rms_eps);
            mat_ref(&n, up, s, dh, cfg.d_latent)
        };
        let q = proj(x_q, s_q, "q");
        let k = proj(x_kv, s_kv, "k");
        let v = proj(x_kv, s_kv, "v");
        let width = cfg.head_width();
        let dl = cfg.d_latent;
        let take = |m: &[f64], row: usize, off: usize, len: usize| -> Vec<f64> {
            m[row * dl + off..row * dl + off + len].to_vec()
        };
        let mut z = vec![0.0; s_q * dl];
        for h in 0..cfg.heads {
            let off = h * width;
            for i in 0..s_q {
                let q_n = take(&q, i, off, cfg.d_nope);
                let q_r = rope_ref(&take(&q, i, off + cfg.d_nope, cfg.d_rope), &q_pos[i..=i], cfg.d_rope, cfg.rope_base);
                let mut scores = vec![0.0; s_kv];
                for j in 0..s_kv {
                    let k_n = take(&k, j, off, cfg.d_nope);
                    let k_r = rope_ref(&take(&k, j, off + cfg.d_nope, cfg.d_rope), &k_pos[j..=j], cfg.d_rope, cfg.rope_base);
                    let dot: f64 = q_n.iter().zip(&k_n).map(|(a, b)| a * b).sum::<f64>()
                        + q_r.iter().zip(&k_r).map(|(a, b)| a * b).sum::<f64>();
                    scores[j] = dot / (dl as f64).sqrt();
                    if causal && j > i {
                        scores[j] = MASK_VALUE;
                    }
                }
                softmax_row_ref(&mut scores);
                for j in 0..s_kv {
                    for t in 0..width {
                        z[i * dl + off + t] += scores[j] * v[j * dl + off + t];
                    }
                }
            }
        }
        mat_ref(&z, &params.get("attn.out.w").data, s_q, dl, cfg.d_model)
    }

    #[test]
    fn matches_naive_double_loop_reference() {
        let cfg = small_cfg();
        let params = init(&cfg, 11);
        let x = rand_rows(11, "attn-x", 4, cfg.d_model);
        let q_pos: Vec<usize> = (0..4).collect();

        for causal in [false, true] {
            let mut sess = Session::eval();
            let xid = sess.tape.leaf(x.clone(), &[4, cfg.d_model], false);
            let out = mdla(&mut sess, &params, &cfg, "attn", "t", xid, xid, &q_pos, &q_pos, causal);
            let want = mdla_ref(&cfg, &params, &x, &x, 4, 4, &q_pos, &q_pos, causal);
            for (a, b) in sess.tape.data(out).iter().zip(&want) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "tape {a} vs reference {b} (causal={causal})"
                );
            }
        }
    }

    #[test]
    fn single_key_attends_exactly_to_its_value() {
        let cfg = small_cfg();
        let params = init(&cfg, 3);
        let x = rand_rows(3, "attn-single", 1, cfg.d_model);
        let mut sess = Session::eval();
        let xid = sess.tape.leaf(x, &[1, cfg.d_model], false);
        let out = mdla(&mut sess, &params, &cfg, "attn", "t", xid, xid, &[0], &[0], false);

        // the only key gets probability exactly 1, so output = V . W_out
        let v = project(&mut sess, &params, &cfg, "attn", "v", xid);
        let w_out = sess.param(&params, "attn.out.w");
        let want = sess.tape.matmul(v, w_out);
        assert_eq!(
            sess.tape.data(out),
            sess.tape.data(want),
            "one-key attention must reduce to the value row bitwise"
        );
    }

    #[test]
    fn causal_rows_ignore_future_tokens_bitwise() {
        let cfg = small_cfg();
        let params = init(&cfg, 5);
        let pos: Vec<usize> = (0..5).collect();
        let base = rand_rows(5, "attn-causal", 5, cfg.d_model);
        let mut noisy = base.clone();
        for v in &mut noisy[3 * cfg.d_model..] {
            *v += 17.0; // rewrite tokens 3-4 entirely
        }

        let run = |data: Vec<f64>| -> Vec<f64> {
            let mut sess = Session::eval();
            let xid = sess.tape.leaf(data, &[5, cfg.d_model], false);
            let out = mdla(&mut sess, &params, &cfg, "attn", "t", xid, xid, &pos, &pos, true);
            sess.tape.data(out).to_vec()
        };
        let a = run(base);
        let b = run(noisy);
        assert_eq!(
            a[..3 * cfg.d_model],
            b[..3 * cfg.d_model],
            "prefix rows must be bitwise-unchanged when future tokens change"
        );
        assert_ne!(a[3 * cfg.d_model..], b[3 * cfg.d_model..]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_masked_entries_are_zero() {
        let cfg = small_cfg();
        let params = init(&cfg, 6);
        let pos: Vec<usize> = (0..4).collect();
        let mut sess = Session::eval();
        sess.capture = true;
        let x = rand_rows(6, "attn-trace", 4, cfg.d_model);
        let xid = sess.tape.leaf(x, &[4, cfg.d_model], false);
        mdla(&mut sess, &params, &cfg, "attn", "probe", xid, xid, &pos, &pos, true);
        assert_eq!(sess.traces.attention.len(), cfg.heads);
        for trace in &sess.traces.attention {
            assert_eq!(trace.scope, "probe");
            for i in 0..trace.rows {
                let row = &trace.weights[i * trace.cols..(i + 1) * trace.cols];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
                for (j, &w) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(w, 0.0, "masked weight at ({i},{j}) must underflow to zero");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_input_produces_zero_output() {
        let cfg = small_cfg();
        let params = init(&cfg, 8);
        let mut sess = Session::eval();
        let xid = sess.tape.leaf(vec![0.0; 3 * cfg.d_model], &[3, cfg.d_model], false);
        let out = mdla(&mut sess, &params, &cfg, "attn", "t", xid, xid, &[0, 1, 2], &[0, 1, 2], false);
        assert!(sess.tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn content_only_attention_ignores_position_relabeling() {
        let cfg = small_cfg();
        let mut params = init(&cfg, 9);
        // zero the up-projection columns feeding every head's rotary slice
        let width = cfg.head_width();
        for which in ["q", "k"] {
            let t = params.get_mut(&format!("attn.{which}_up.w"));
            let cols = cfg.d_latent;
            for row in 0..cfg.d_model / cfg.heads {
                for h in 0..cfg.heads {
                    let off = h * width + cfg.d_nope;
                    for c in off..off + cfg.d_rope {
                        t.data[row * cols + c] = 0.0;
                    }
                }
            }
        }
        let x = rand_rows(9, "attn-nope", 4, cfg.d_model);
        let run = |k_pos: &[usize]| -> Vec<f64> {
            let mut sess = Session::eval();
            let xid = sess.tape.leaf(x.clone(), &[4, cfg.d_model], false);
            let out = mdla(&mut sess, &params, &cfg, "attn", "t", xid, xid, &[0, 1, 2, 3], k_pos, false);
            sess.tape.data(out).to_vec()
        };
        assert_eq!(
            run(&[0, 1, 2, 3]),
            run(&[3, 0, 2, 1]),
            "with a zeroed rotary branch, key position labels must not matter"
        );
    }

    #[test]
    fn identical_key_rows_attend_identically_for_every_query() {
        let cfg = small_cfg();
        let params = init(&cfg, 10);
        let one_row = rand_rows(10, "attn-kv-row", 1, cfg.d_model);
        let kv: Vec<f64> = one_row.iter().cycle().take(5 * cfg.d_model).cloned().collect();
        let xq = rand_rows(10, "attn-q-rows", 3, cfg.d_model);
        let mut sess = Session::eval();
        let qid = sess.tape.leaf(xq, &[3, cfg.d_model], false);
        let kid = sess.tape.leaf(kv, &[5, cfg.d_model], false);
        let out = mdla(&mut sess, &params, &cfg, "attn", "t", qid, kid, &[0, 1, 2], &[0, 1, 2, 3, 4], false);
        let data = sess.tape.data(out);
        for row in 1..3 {
            for c in 0..cfg.d_model {
                let diff = (data[row * cfg.d_model + c] - data[c]).abs();
                assert!(diff < 1e-12, "query {row} col {c} differs by {diff}");
            }
        }
    }

    #[test]
    fn rope_position_zero_is_identity_and_unit_pair_rotates() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.3, -0.7, 1.1, 0.2], &[1, 4], false);
        let y = tape.rope(x, &[0], 1e4);
        assert_eq!(tape.data(y), &[0.3, -0.7, 1.1, 0.2], "position 0 must not rotate");

        // pair (1,0) in a 2-wide rotary slice: theta_0 = base^0 = 1, so
        // position m maps it to (cos m, sin m)
        for m in [1usize, 2, 7] {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![1.0, 0.0], &[1, 2], false);
            let y = tape.rope(x, &[m], 1e4);
            let want = [(m as f64).cos(), (m as f64).sin()];
            for (a, b) in tape.data(y).iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "rotation at position {m}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rope_scores_depend_only_on_relative_offset() {
        let mut r = crate::rng::stream(12, "rope-rel", 0);
        let d = 6;
        for trial in 0..100 {
            let q: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let m = r.gen_range(0usize..32);
            let n = r.gen_range(0usize..32);
            let delta = r.gen_range(0usize..32);
            let dot = |qp: usize, kp: usize| -> f64 {
                let mut tape = Tape::new();
                let qi = tape.leaf(q.clone(), &[1, d], false);
                let ki = tape.leaf(k.clone(), &[1, d], false);
                let qr = tape.rope(qi, &[qp], 1e4);
                let kr = tape.rope(ki, &[kp], 1e4);
                let kt = tape.transpose(kr);
                let s = tape.matmul(qr, kt);
                tape.data(s)[0]
            };
            let a = dot(m, n);
            let b = dot(m + delta, n + delta);
            assert!(
                (a - b).abs() < 1e-9,
                "trial {trial}: offset ({m},{n}) gave {a} but shifted ({},{}) gave {b}",
                m + delta,
                n + delta
            );
        }
    }

    #[test]
    fn projection_chain_gradcheck() {
        let cfg = small_cfg();
        let mut params = init(&cfg, 13);
        let x = rand_rows(13, "attn-grad", 3, cfg.d_model);

        let loss_of = |params: &ParamStore| -> (Session, ValueId) {
            let mut sess = Session::new(Phase::GradCheck, 13, 0);
            let xid = sess.tape.leaf(x.clone(), &[3, cfg.d_model], false);
            let out = mdla(&mut sess, params, &cfg, "attn", "t", xid, xid, &[0, 1, 2], &[0, 1, 2], true);
            let shape = sess.tape.shape(out).to_vec();
            let n: usize = shape.iter().product();
            let probe: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let p = sess.tape.constant(probe, &shape);
            let prod = sess.tape.mul(out, p);
            let loss = sess.tape.sum_all(prod);
            (sess, loss)
        };

        let (mut sess, loss) = loss_of(&params);
        sess.tape.backward(loss).unwrap();
        let mut with_grads = params.clone();
        with_grads.zero_grads();
        sess.accumulate_grads(&mut with_grads, 1.0);
        let analytic = gradcheck::grads_by_name(&with_grads);

        let report = gradcheck::check_params(&mut params, &analytic, 1e-5, |p| {
            let (sess, loss) = loss_of(p);
            sess.tape.scalar(loss)
        });
        assert!(
            report.passes(1e-4),
            "attention gradcheck failed:\n{}",
            report.format_table()
        );
    }
}
