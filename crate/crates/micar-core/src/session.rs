//! One forward/backward pass worth of state: the tape, the parameter leaves
//! bound onto it, the dropout stream, and any requested traces.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use crate::params::{BufStore, ParamStore};
use crate::rng;
use crate::tensor::{Tape, ValueId};

/// What kind of pass this is. Controls batch-norm statistic updates and
/// dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Running-statistic updates and dropout active.
    Train,
    /// No side effects and no dropout, so the loss is a pure function of the
    /// parameters — required for finite-difference checks.
    GradCheck,
    /// No side effects, no dropout.
    Eval,
}

impl Phase {
    fn update_running(self) -> bool {
        matches!(self, Phase::Train)
    }

    fn stochastic(self) -> bool {
        matches!(self, Phase::Train)
    }
}

/// Attention weights captured for one head of one attention site.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    /// Site path, e.g. `dec.0.self` or `dec.1.gf.cross`.
    pub scope: String,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major post-softmax weights (pre attention-dropout).
    pub weights: Vec<f64>,
}

/// Router state captured for one mixture-of-experts site.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// Site path, e.g. `dec.0.moe`.
    pub scope: String,
    pub experts: usize,
    /// Row-major `tokens x experts` softmax scores (pre top-k).
    pub scores: Vec<f64>,
    /// Expert indices selected for each token, highest score first.
    pub selected: Vec<Vec<usize>>,
    /// This site's load-balance term.
    pub load_balance: f64,
}

#[derive(Debug, Default, Clone)]
pub struct TraceBag {
    pub attention: Vec<AttnTrace>,
    pub routing: Vec<RoutingTrace>,
}

/// Context for a single forward pass. Create one per pass; the tape is not
/// reused across passes.
pub struct Session {
    pub tape: Tape,
    phase: Phase,
    bound: BTreeMap<String, ValueId>,
    dropout_rng: ChaCha20Rng,
    /// When true, attention and routing snapshots are pushed into `traces`.
    pub capture: bool,
    pub traces: TraceBag,
    /// Named call counters (used to assert which experts actually ran).
    pub counters: BTreeMap<String, usize>,
}

impl Session {
    /// `seed`/`step` key the dropout stream; eval passes ignore them.
    pub fn new(phase: Phase, seed: u64, step: u64) -> Self {
        Session {
            tape: Tape::new(),
            phase,
            bound: BTreeMap::new(),
            dropout_rng: rng::stream(seed, "dropout", step),
            capture: false,
            traces: TraceBag::default(),
            counters: BTreeMap::new(),
        }
    }

    pub fn eval() -> Self {
        Session::new(Phase::Eval, 0, 0)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Bind a parameter onto the tape (cached: one leaf per name per pass).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> ValueId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let t = store.get(name);
        let id = self.tape.leaf(t.data.clone(), &t.shape, true);
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Dropout that is active only in the training phase.
    pub fn dropout(&mut self, x: ValueId, rate: f64) -> ValueId {
        if !self.phase.stochastic() || rate == 0.0 {
            return x;
        }
        self.tape.dropout(x, rate, &mut self.dropout_rng)
    }

    /// A full batch-norm layer: `{prefix}.gamma` / `{prefix}.beta` parameters
    /// plus `{prefix}.running_mean` / `{prefix}.running_var` buffers.
    ///
    /// Every phase normalizes with the running estimates — the inference-form
    /// transform — and training passes then fold the input's per-channel
    /// spatial moments into the buffers. Images pass through one at a time
    /// here, so "batch" statistics would degenerate to per-image statistics,
    /// and per-image normalization after a linear layer provably cancels
    /// global-intensity differences between images; the running estimates
    /// converge to dataset-wide moments instead, which preserves such cues.
    /// Normalizing with the pre-update estimates keeps the applied transform
    /// a fixed affine map, so its gradients are exact.
    pub fn batchnorm(
        &mut self,
        params: &ParamStore,
        bufs: &mut BufStore,
        prefix: &str,
        x: ValueId,
        momentum: f64,
        eps: f64,
    ) -> ValueId {
        let gamma = self.param(params, &format!("{prefix}.gamma"));
        let beta = self.param(params, &format!("{prefix}.beta"));
        let mean = bufs.get(&format!("{prefix}.running_mean")).data.clone();
        let var = bufs.get(&format!("{prefix}.running_var")).data.clone();
        let y = self.tape.batchnorm_eval(x, gamma, beta, eps, mean, var);

        if self.phase.update_running() {
            let (channels, spatial) = {
                let s = self.tape.shape(x);
                (s[0], s[1] * s[2])
            };
            let hw = spatial as f64;
            let data = self.tape.data(x);
            let means: Vec<f64> = (0..channels)
                .map(|c| data[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / hw)
                .collect();
            let rm = bufs.get_mut(&format!("{prefix}.running_mean"));
            for (r, &m) in rm.data.iter_mut().zip(&means) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            // running variance uses the unbiased estimate, as is standard; a
            // single spatial sample has no variance estimate at all, so the
            // buffer is left untouched rather than decayed toward zero
            if spatial > 1 {
                let rv = bufs.get_mut(&format!("{prefix}.running_var"));
                for (c, r) in rv.data.iter_mut().enumerate() {
                    let v = data[c * spatial..(c + 1) * spatial]
                        .iter()
                        .map(|&x| (x - means[c]) * (x - means[c]))
                        .sum::<f64>()
                        / (hw - 1.0);
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
        y
    }

    pub fn count(&mut self, key: &str) {
        *self.counters.entry(key.to_string()).or_insert(0) += 1;
    }

    /// Add this pass's parameter gradients into the store's grad buffers
    /// (scaled by `scale`). Parameters never touched by the pass are left
    /// as-is; call `store.zero_grads()` before the first pass of a batch.
    pub fn accumulate_grads(&self, store: &mut ParamStore, scale: f64) {
        for (name, &id) in &self.bound {
            if let Some(g) = self.tape.grad(id) {
                let t = store.get_mut(name);
                let dst = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }

    /// Names bound so far (for tests).
    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}
