//! Named parameter and buffer stores.
//!
//! Parameters are addressed by dot-separated paths (`dec.0.moe.expert.2.w1`).
//! Both stores iterate in lexicographic order, which fixes the layout of
//! checkpoints and the order of every gradient-related walk.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use crate::rng;
use crate::tensor::Tensor;

/// Trainable tensors, keyed by parameter path. Every entry participates in
/// gradients and optimizer updates.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) {
        let prev = self.map.insert(name.to_string(), t);
        assert!(prev.is_none(), "parameter `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Zero (allocating where missing) every gradient buffer.
    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }
}

/// Non-trainable state (batch-norm running statistics). Same addressing as
/// [`ParamStore`] but never receives gradients.
#[derive(Debug, Clone, Default)]
pub struct BufStore {
    map: BTreeMap<String, Tensor>,
}

impl BufStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, t: Tensor) {
        let prev = self.map.insert(name.to_string(), t);
        assert!(prev.is_none(), "buffer `{name}` registered twice");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

/// Gaussian-initialized tensor with standard deviation `std`.
pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| std * rng::normal(rng)).collect();
    Tensor::new(shape, data)
}

/// Standard deviation used for all weight matrices and convolution kernels.
pub const INIT_STD: f64 = 0.02;

/// Register a weight drawn from `N(0, INIT_STD^2)`, keyed by its own name so
/// initialization is independent of registration order.
pub fn init_weight(store: &mut ParamStore, seed: u64, name: &str, shape: &[usize]) {
    let mut r = rng::stream(seed, name, 0);
    store.register(name, randn(shape, INIT_STD, &mut r));
}

/// Register a constant-one vector (norm gains, batch-norm scale).
pub fn init_ones(store: &mut ParamStore, name: &str, n: usize) {
    store.register(name, Tensor::full(&[n], 1.0));
}

/// Register a zero vector (biases, batch-norm shift).
pub fn init_zeros(store: &mut ParamStore, name: &str, n: usize) {
    store.register(name, Tensor::zeros(&[n]));
}
