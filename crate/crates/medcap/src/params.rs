//! Named parameter store shared by all trainable modules.
//!
//! Parameters are leaf tensors keyed by dot-separated path
//! (`vision.blocks.0.attn.wq`, `decoder.lstm.l2.w_f`, ...). Iteration order
//! is the sorted key order, which keeps training and serialization
//! deterministic. Freezing a parameter rebuilds its leaf without the
//! gradient flag, so the backward pass skips frozen subtrees entirely.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Scalar, Tensor};

pub struct ParamStore<F: Scalar> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    /// Insert a trainable parameter. Panics on duplicate names.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) {
        let prev = self
            .entries
            .insert(name.to_string(), Tensor::leaf(shape, data, true));
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self, name: &str) -> bool {
        self.get(name).requires_grad()
    }

    /// Flip the gradient flag, rebuilding the leaf.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        let t = self.get(name);
        if t.requires_grad() == trainable {
            return;
        }
        let rebuilt = Tensor::leaf(t.shape().to_vec(), t.data().to_vec(), trainable);
        self.entries.insert(name.to_string(), rebuilt);
    }

    /// Replace a parameter's values, preserving shape and trainability.
    pub fn update(&mut self, name: &str, data: Vec<F>) {
        let t = self.get(name);
        assert_eq!(t.len(), data.len(), "update: size mismatch for {name}");
        let rebuilt = Tensor::leaf(t.shape().to_vec(), data, t.requires_grad());
        self.entries.insert(name.to_string(), rebuilt);
    }

    /// Gradients keyed by parameter name, for every trainable parameter the
    /// backward pass reached.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Vec<F>> {
        let mut out = BTreeMap::new();
        for (name, tensor) in &self.entries {
            if !tensor.requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(tensor) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Truncated normal init: N(0, sigma) resampled until |x| <= 2 sigma.
pub fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<F> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        for z in [r * theta.cos(), r * theta.sin()] {
            if out.len() < n && z.abs() <= 2.0 {
                out.push(F::of(z * sigma));
            }
        }
    }
    out
}

pub fn uniform<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<F> {
    (0..n).map(|_| F::of(rng.gen_range(lo..hi))).collect()
}

pub fn zeros<F: Scalar>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

pub fn full<F: Scalar>(n: usize, v: f64) -> Vec<F> {
    vec![F::of(v); n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::backward;

    #[test]
    fn freeze_drops_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", vec![2], vec![1.0, 2.0]);
        let loss = store.get("w").mul(store.get("w")).sum();
        let grads = backward(&loss);
        assert_eq!(store.collect_grads(&grads).len(), 1);

        store.set_trainable("w", false);
        let loss = store.get("w").mul(store.get("w")).sum();
        let grads = backward(&loss);
        assert!(store.collect_grads(&grads).is_empty());
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = stream(5, "init", 0);
        let v: Vec<f64> = trunc_normal(&mut rng, 10_000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-12));
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.001);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_insert_panics() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", vec![1], vec![0.0]);
        store.insert("w", vec![1], vec![0.0]);
    }
}
