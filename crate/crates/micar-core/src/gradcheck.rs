//! Central-finite-difference verification of parameter gradients.
//!
//! The caller supplies a forward-only loss closure plus a map of analytic
//! gradients (from one backward pass); this module perturbs every scalar
//! parameter in place, differences the loss, and reports the worst relative
//! error per parameter group. The check only ever calls the forward pass, so
//! it stays independent of the backward implementation it verifies.

use std::collections::BTreeMap;

use rand::Rng;

use crate::params::ParamStore;
use crate::rng;

/// |analytic - numeric| / max(1, |numeric|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Move parameters off their symmetric initialization so finite differences
/// see a smooth neighborhood: with zero biases and shifts, conv stages emit
/// exact zeros that sit right on the ReLU kink, and 0.02-std conv weights
/// keep activations so small that a difference step can cross it.
pub fn scale_to_generic_point(params: &mut ParamStore, seed: u64) {
    let mut r = rng::stream(seed, "gradcheck-point", 0);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let t = params.get_mut(&name);
        if name.ends_with(".conv.w") {
            t.data.iter_mut().for_each(|v| *v *= 15.0);
        } else if name.ends_with(".bn.beta") {
            t.data.iter_mut().for_each(|v| *v = 0.3 * r.gen_range(-1.0..1.0));
        } else if name.ends_with(".bn.gamma") {
            t.data.iter_mut().for_each(|v| *v = 1.0 + 0.2 * r.gen_range(-1.0..1.0));
        }
    }
}

/// Reporting granularity: the first two dot-separated path segments
/// (`dec.0.moe.router.w` -> `dec.0`; `embed.table` -> `embed.table`).
pub fn group_of(name: &str) -> String {
    let mut it = name.split('.');
    match (it.next(), it.next()) {
        (Some(a), Some(b)) => format!("{a}.{b}"),
        (Some(a), None) => a.to_string(),
        _ => String::new(),
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    /// Scalar parameters checked in this group.
    pub params: usize,
    pub worst_rel_err: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub groups: Vec<GroupReport>,
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_param: String,
}

impl Report {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err < tol
    }

    /// Fixed-width table, one row per parameter group.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>8} {:>14}  worst at\n", "group", "params", "worst rel err"));
        for g in &self.groups {
            out.push_str(&format!(
                "{:<24} {:>8} {:>14.3e}  {}\n",
                g.group, g.params, g.worst_rel_err, g.worst_param
            ));
        }
        out.push_str(&format!(
            "total: {} parameters, worst rel err {:.3e} at `{}`\n",
            self.checked, self.worst_rel_err, self.worst_param
        ));
        out
    }
}

/// Compare `analytic` gradients against central differences of `loss` with
/// the given `step`, perturbing each parameter scalar in place (and restoring
/// it). Parameters missing from `analytic` are treated as all-zero gradients,
/// which is the correct expectation for parameters unreachable from the loss.
pub fn check_params<F>(
    params: &mut ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    step: f64,
    mut loss: F,
) -> Report
where
    F: FnMut(&ParamStore) -> f64,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;

    for name in names {
        let n = params.get(&name).numel();
        let grad = analytic.get(&name).cloned().unwrap_or_else(|| vec![0.0; n]);
        assert_eq!(grad.len(), n, "analytic gradient length mismatch for `{name}`");
        let group = groups.entry(group_of(&name)).or_insert_with(|| GroupReport {
            group: group_of(&name),
            params: 0,
            worst_rel_err: 0.0,
            worst_param: name.clone(),
        });
        for i in 0..n {
            let orig = params.get(&name).data[i];
            params.get_mut(&name).data[i] = orig + step;
            let fp = loss(params);
            params.get_mut(&name).data[i] = orig - step;
            let fm = loss(params);
            params.get_mut(&name).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let err = rel_err(grad[i], numeric);
            checked += 1;
            group.params += 1;
            if err > group.worst_rel_err {
                group.worst_rel_err = err;
                group.worst_param = format!("{name}[{i}]");
            }
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
        }
    }

    Report {
        groups: groups.into_values().collect(),
        checked,
        worst_rel_err: worst.0,
        worst_param: worst.1,
    }
}

/// Collect `store`-level analytic gradients into a name-keyed map.
pub fn grads_by_name(params: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .filter_map(|(name, t)| t.grad.as_ref().map(|g| (name.clone(), g.clone())))
        .collect()
}
