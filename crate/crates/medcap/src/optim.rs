//! Adam, the warmup + cosine learning-rate schedule, and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Bias-corrected Adam state over a named parameter group. Moment tensors
/// are allocated lazily the first time a parameter's gradient is seen and
/// always shape-match their parameter.
pub struct AdamState<F: Scalar> {
    pub first_moment: BTreeMap<String, Vec<F>>,
    pub second_moment: BTreeMap<String, Vec<F>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl<F: Scalar> Default for AdamState<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected Adam update over `grads`, writing new parameter
/// values into the store. Increments `step_count` once per call.
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &BTreeMap<String, Vec<F>>,
    state: &mut AdamState<F>,
    lr: f64,
) {
    assert!(lr >= 0.0, "adam_step: negative learning rate");
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, grad) in grads {
        let param = store.get(name);
        assert_eq!(
            param.len(),
            grad.len(),
            "adam_step: gradient shape mismatch for {name}"
        );
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![F::zero(); grad.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![F::zero(); grad.len()]);
        let mut next = Vec::with_capacity(grad.len());
        for ((p, g), (m, v)) in param
            .data()
            .iter()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g.f64();
            let m_new = state.beta1 * m.f64() + (1.0 - state.beta1) * g;
            let v_new = state.beta2 * v.f64() + (1.0 - state.beta2) * g * g;
            *m = F::of(m_new);
            *v = F::of(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            next.push(F::of(p.f64() - lr * m_hat / (v_hat.sqrt() + state.epsilon)));
        }
        store.update(name, next);
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. Both branches give `base_lr` at the boundary.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        assert!(base_lr > 0.0, "LrSchedule: base_lr must be positive");
        assert!(total_steps > 0, "LrSchedule: total_steps must be positive");
        assert!(
            warmup_steps <= total_steps,
            "LrSchedule: warmup {warmup_steps} exceeds total {total_steps}"
        );
        LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        assert!(
            step <= self.total_steps,
            "lr_at: step {step} beyond total {}",
            self.total_steps
        );
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        let progress = if span == 0 {
            1.0
        } else {
            (step - self.warmup_steps) as f64 / span as f64
        };
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scale all gradients by `max_norm / norm` when the joint L2 norm exceeds
/// `max_norm`. Returns the pre-clip global norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, Vec<F>>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
    let mut sq = 0.0f64;
    for g in grads.values() {
        for v in g {
            let v = v.f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store_with(name: &str, data: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, vec![data.len()], data);
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = store_with("w", vec![1.5, -2.0]);
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        adam_step(&mut store, &grads, &mut state, 0.1);
        assert_eq!(store.get("w").data(), &[1.5, -2.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_update_magnitude_is_lr() {
        // bias correction makes |m_hat / (sqrt(v_hat) + eps)| ~ 1 at t = 1
        let mut store = store_with("w", vec![0.0]);
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![2.0])]);
        adam_step(&mut store, &grads, &mut state, 0.1);
        assert_abs_diff_eq!(store.get("w").data()[0], -0.1, epsilon = 1e-6);
    }

    #[test]
    fn constant_gradient_descends_quadratic_bowl() {
        // loss = 0.5 w^2, grad = w; two steps must strictly lower |w|
        let mut store = store_with("w", vec![1.0]);
        let mut state = AdamState::new();
        let mut last = 1.0f64;
        for _ in 0..2 {
            let w = store.get("w").data()[0];
            let grads = BTreeMap::from([("w".to_string(), vec![w])]);
            adam_step(&mut store, &grads, &mut state, 0.05);
            let now = store.get("w").data()[0];
            assert!(now.abs() < last.abs(), "|w| did not shrink: {last} -> {now}");
            last = now;
        }
    }

    #[test]
    #[should_panic(expected = "gradient shape mismatch")]
    fn shape_mismatch_panics() {
        let mut store = store_with("w", vec![0.0, 0.0]);
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        adam_step(&mut store, &grads, &mut state, 0.1);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::new(0.3, 100, 1000);
        assert_eq!(s.lr_at(0), 0.0);
        assert_abs_diff_eq!(s.lr_at(50), 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lr_at(100), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lr_at(1000), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn schedule_continuous_at_warmup_boundary() {
        let s = LrSchedule::new(1.0, 10, 20);
        // approach from below vs the cosine branch at the boundary
        let below = s.lr_at(9);
        assert!(below < 1.0 && below > 0.8);
        assert_abs_diff_eq!(s.lr_at(10), 1.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "beyond total")]
    fn schedule_rejects_out_of_range() {
        LrSchedule::new(1.0, 0, 10).lr_at(11);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = BTreeMap::from([("a".to_string(), vec![0.3f64, 0.4])]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_abs_diff_eq!(norm, 0.5, epsilon = 1e-12);
        assert_eq!(grads["a"], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = BTreeMap::from([("a".to_string(), vec![2.0f64, 0.0])]);
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads["a"], vec![1.0, 0.0]);
    }

    #[test]
    fn clip_spans_many_tensors() {
        // joint norm 4 -> every entry scaled by 0.25
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![2.0f64, 2.0]);
        grads.insert("b".to_string(), vec![2.0f64, 2.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_abs_diff_eq!(norm, 4.0, epsilon = 1e-12);
        for v in grads.values().flatten() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
        // post-clip norm == max_norm
        let post = clip_global_norm(&mut grads.clone(), f64::MAX);
        assert!(post <= 1.0 + 1e-9);
    }
}
