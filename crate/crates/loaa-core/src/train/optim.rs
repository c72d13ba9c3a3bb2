//! Adam and AdamW with bias-corrected moments. AdamW applies the decoupled
//! decay `p <- p - lr * wd * p` before the moment update term; Adam folds
//! `wd * p` into the gradient instead. With `wd = 0` the two coincide.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl core::str::FromStr for OptimizerKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(CoreError::Config(format!(
                "unknown optimizer '{other}', valid options: adam, adamw"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimConfig { kind, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment buffers, one slot per store entry.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
    t: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    /// L2 norm over every gradient applied this step.
    pub grad_norm: f64,
    pub updated_tensors: usize,
}

impl OptimState {
    pub fn new(n_entries: usize) -> Self {
        OptimState { m: vec![None; n_entries], v: vec![None; n_entries], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients stored on the tensors, then
    /// clears them. Frozen tensors and tensors without a gradient are never
    /// touched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, cfg: &OptimConfig) -> Result<StepStats> {
        if self.m.len() != store.len() {
            return Err(CoreError::Dimension(format!(
                "optimizer state tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let lr = cfg.lr as f32;
        let wd = cfg.weight_decay as f32;
        let eps = cfg.eps as f32;
        let mut sq_norm = 0.0f64;
        let mut updated = 0;
        for (idx, entry) in store.iter_mut().enumerate() {
            if entry.frozen {
                continue;
            }
            let Some(grad) = entry.tensor.grad() else { continue };
            let grad = grad.to_vec();
            let n = entry.tensor.numel();
            let m = self.m[idx].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[idx].get_or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(CoreError::Dimension(format!(
                    "state slot for '{}' has {} elements, tensor has {n}",
                    entry.name,
                    m.len()
                )));
            }
            let params = entry.tensor.data_mut();
            for i in 0..n {
                let mut g = grad[i];
                sq_norm += (g as f64) * (g as f64);
                match cfg.kind {
                    OptimizerKind::AdamW => {
                        if wd != 0.0 {
                            params[i] -= lr * wd * params[i];
                        }
                    }
                    OptimizerKind::Adam => {
                        if wd != 0.0 {
                            g += wd * params[i];
                        }
                    }
                }
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1 as f32;
                let v_hat = v[i] / bc2 as f32;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            entry.tensor.clear_grad();
            updated += 1;
        }
        Ok(StepStats { grad_norm: sq_norm.sqrt(), updated_tensors: updated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(alloc::vec![1], alloc::vec![value]).unwrap()).unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore<f32>, g: &[f32]) {
        store.entry_mut(0).tensor.accumulate_grad(g).unwrap();
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes the first step ~ lr * sign(g).
        let mut store = store_with(1.0);
        let mut state = OptimState::new(store.len());
        let cfg = OptimConfig::new(OptimizerKind::Adam, 0.1, 0.0);
        set_grad(&mut store, &[1.0]);
        state.step(&mut store, &cfg).unwrap();
        let p = store.entry(0).tensor.data()[0];
        assert!((p - 0.9).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn zero_weight_decay_makes_adam_and_adamw_identical() {
        let mut a = store_with(0.7);
        let mut b = store_with(0.7);
        let mut sa = OptimState::new(1);
        let mut sb = OptimState::new(1);
        let ca = OptimConfig::new(OptimizerKind::Adam, 0.05, 0.0);
        let cb = OptimConfig::new(OptimizerKind::AdamW, 0.05, 0.0);
        for k in 0..10 {
            let g = [(k as f32 * 0.37).sin()];
            set_grad(&mut a, &g);
            set_grad(&mut b, &g);
            sa.step(&mut a, &ca).unwrap();
            sb.step(&mut b, &cb).unwrap();
            assert_eq!(a.entry(0).tensor.data(), b.entry(0).tensor.data());
        }
    }

    #[test]
    fn nonzero_decay_separates_them() {
        let mut a = store_with(0.7);
        let mut b = store_with(0.7);
        let mut sa = OptimState::new(1);
        let mut sb = OptimState::new(1);
        let ca = OptimConfig::new(OptimizerKind::Adam, 0.05, 0.1);
        let cb = OptimConfig::new(OptimizerKind::AdamW, 0.05, 0.1);
        for _ in 0..5 {
            set_grad(&mut a, &[0.3]);
            set_grad(&mut b, &[0.3]);
            sa.step(&mut a, &ca).unwrap();
            sb.step(&mut b, &cb).unwrap();
        }
        assert_ne!(a.entry(0).tensor.data(), b.entry(0).tensor.data());
    }

    #[test]
    fn zero_grad_with_fresh_state_leaves_param_unchanged() {
        let mut store = store_with(0.42);
        let mut state = OptimState::new(1);
        let cfg = OptimConfig::new(OptimizerKind::Adam, 0.1, 0.0);
        set_grad(&mut store, &[0.0]);
        state.step(&mut store, &cfg).unwrap();
        assert_eq!(store.entry(0).tensor.data()[0], 0.42);
    }

    #[test]
    fn frozen_and_gradless_tensors_are_never_touched() {
        let mut store = ParamStore::new();
        store.add("frozen", Tensor::new(alloc::vec![1], alloc::vec![1.0f32]).unwrap()).unwrap();
        store.add("idle", Tensor::new(alloc::vec![1], alloc::vec![2.0f32]).unwrap()).unwrap();
        store.entry_mut(0).frozen = true;
        store.entry_mut(0).tensor.accumulate_grad(&[5.0]).unwrap();
        let mut state = OptimState::new(2);
        let cfg = OptimConfig::new(OptimizerKind::AdamW, 0.1, 0.01);
        let stats = state.step(&mut store, &cfg).unwrap();
        assert_eq!(stats.updated_tensors, 0);
        assert_eq!(store.entry(0).tensor.data()[0], 1.0);
        assert_eq!(store.entry(1).tensor.data()[0], 2.0);
    }

    #[test]
    fn both_optimizers_descend_a_convex_quadratic() {
        // f(p) = p^2 / 2, grad = p; after warm-up both optimizers shrink the
        // loss monotonically at lr <= 1e-2.
        for kind in [OptimizerKind::Adam, OptimizerKind::AdamW] {
            let mut store = store_with(1.0);
            let mut state = OptimState::new(1);
            let cfg = OptimConfig::new(kind, 1e-2, 0.0);
            let mut losses = alloc::vec::Vec::new();
            for _ in 0..200 {
                let p = store.entry(0).tensor.data()[0];
                losses.push(0.5 * p * p);
                set_grad(&mut store, &[p]);
                state.step(&mut store, &cfg).unwrap();
            }
            for w in losses[5..].windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "loss went up: {} -> {}", w[0], w[1]);
            }
            assert!(losses.last().unwrap() < &0.3);
        }
    }

    #[test]
    fn state_size_mismatch_is_a_dimension_error() {
        let mut store = store_with(1.0);
        let mut state = OptimState::new(3);
        let cfg = OptimConfig::new(OptimizerKind::Adam, 0.1, 0.0);
        assert!(matches!(state.step(&mut store, &cfg), Err(CoreError::Dimension(_))));
    }
}
