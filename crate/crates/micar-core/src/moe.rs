//! Sparse mixture-of-experts feedforward layer: a softmax router scores every
//! token over `E` experts, each token's top-k experts run their gated FFN on
//! it, and contributions are summed with the raw softmax scores (no
//! renormalization). A negative-entropy load-balancing term over the mean
//! router scores pushes utilization toward uniform.

use crate::config::ModelConfig;
use crate::params::{init_weight, ParamStore};
use crate::session::{RoutingTrace, Session};
use crate::tensor::ValueId;
use crate::transformer;

/// One MoE pass: combined expert output plus the load-balance scalar.
#[derive(Debug, Clone, Copy)]
pub struct MoeOut {
    /// `s_t x d_model` mixture of selected expert outputs.
    pub y: ValueId,
    /// Scalar `sum_e mean_scores_e * ln(mean_scores_e)`, in `[-ln E, 0]`.
    pub load_balance: ValueId,
}

/// Register the router and the `E` expert FFNs under `prefix`.
pub fn register_params(cfg: &ModelConfig, seed: u64, params: &mut ParamStore, prefix: &str) {
    init_weight(params, seed, &format!("{prefix}.router.w"), &[cfg.d_model, cfg.experts]);
    for e in 0..cfg.experts {
        transformer::register_ffn(cfg, seed, params, &format!("{prefix}.expert.{e}"));
    }
}

/// Indices of the `k` largest entries of `row`, best first; ties go to the
/// lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite scores").then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Route and mix. Experts that no token selected are never evaluated; each
/// evaluated expert bumps the `{prefix}.expert.{e}` session counter.
pub fn moe_forward(
    sess: &mut Session,
    params: &ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    scope: &str,
    x: ValueId,
) -> MoeOut {
    let s_t = sess.tape.shape(x)[0];
    let router = sess.param(params, &format!("{prefix}.router.w"));
    let logits = sess.tape.matmul(x, router);
    let scores = sess.tape.softmax_rows(logits);

    // discrete routing decisions come from the score values themselves
    let score_data = sess.tape.data(scores).to_vec();
    let selected: Vec<Vec<usize>> = (0..s_t)
        .map(|t| top_k(&score_data[t * cfg.experts..(t + 1) * cfg.experts], cfg.top_k))
        .collect();

    // load balance: mean score per expert, then sum of x*ln(x)
    let mean_scores = sess.tape.mean_rows(scores);
    let ent = sess.tape.xlogx(mean_scores);
    let load_balance = sess.tape.sum_all(ent);

    if sess.capture {
        sess.traces.routing.push(RoutingTrace {
            scope: scope.to_string(),
            experts: cfg.experts,
            scores: score_data.clone(),
            selected: selected.clone(),
            load_balance: sess.tape.scalar(load_balance),
        });
    }

    let mut combined: Option<ValueId> = None;
    for e in 0..cfg.experts {
        let rows: Vec<usize> = (0..s_t).filter(|&t| selected[t].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        sess.count(&format!("{prefix}.expert.{e}"));
        let sub = sess.tape.gather_rows(x, &rows);
        let out = transformer::gated_ffn(sess, params, cfg, &format!("{prefix}.expert.{e}"), sub);
        let col = sess.tape.select_col(scores, e);
        let weights = sess.tape.gather_rows(col, &rows);
        let scaled = sess.tape.scale_rows(out, weights);
        let placed = sess.tape.scatter_rows(scaled, &rows, s_t);
        combined = Some(match combined {
            Some(acc) => sess.tape.add(acc, placed),
            None => placed,
        });
    }
    let y = combined.unwrap_or_else(|| {
        sess.tape.constant(vec![0.0; s_t * cfg.d_model], &[s_t, cfg.d_model])
    });

    MoeOut { y, load_balance }
}
