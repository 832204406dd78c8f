use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW hyper-parameters and the warm-up + cosine learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Step at which the cosine reaches zero.
    pub total_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::lm_stage()
    }
}

impl AdamWConfig {
    /// Vision-language stage values (β₂ = 0.95, decay 0.1).
    pub fn lm_stage() -> Self {
        Self {
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.1,
            warmup_steps: 100,
            total_steps: 1000,
            grad_clip: 1.0,
        }
    }

    /// Tokenizer stage values (β₂ = 0.99, decay 0.01).
    pub fn tokenizer_stage() -> Self {
        Self {
            beta2: 0.99,
            weight_decay: 0.01,
            ..Self::lm_stage()
        }
    }

    /// Learning rate used for the update numbered `step` (0-based).
    ///
    /// Linear from 0 at step 0 to the peak at `warmup_steps`, then cosine
    /// decay reaching exactly 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Per-parameter moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub config: AdamWConfig,
    pub step: usize,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamWConfig, store: &ParamStore<S>) -> Self {
        let zeros = |s: &ParamStore<S>| {
            s.iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Applies one AdamW update from the grads held in `store` and returns
    /// the pre-clip global gradient norm. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> f64 {
        let c = &self.config;
        let norm = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt();
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - c.beta1), S::lit(1.0 - c.beta2));
        let step_size = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(c.eps);
        let decay = S::lit(1.0 - lr * c.weight_decay);
        let clip = S::lit(clip);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            // Decoupled decay on weight matrices only.
            let decays = p.value.rank() >= 2 && c.weight_decay != 0.0;
            let iter = p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (mi, vi)) in iter {
                let g = g * clip;
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                if decays {
                    *w *= decay;
                }
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = scalar_store(0.7);
        let cfg = AdamWConfig {
            warmup_steps: 0,
            weight_decay: 0.0,
            ..AdamWConfig::lm_stage()
        };
        let mut opt = OptimizerState::new(cfg, &store);
        for _ in 0..5 {
            opt.step(&mut store);
        }
        assert_eq!(store.get(store.find("x").unwrap()).value.item(), 0.7);
    }

    #[test]
    fn warmup_starts_at_zero_and_cosine_ends_at_zero() {
        let cfg = AdamWConfig {
            peak_lr: 0.1,
            warmup_steps: 10,
            total_steps: 110,
            ..AdamWConfig::lm_stage()
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(5) - 0.05).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.05).abs() < 1e-12);
        assert_eq!(cfg.lr_at(110), 0.0);
        assert_eq!(cfg.lr_at(500), 0.0);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_peak_rate() {
        let mut store = scalar_store(1.0);
        let id = store.find("x").unwrap();
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let cfg = AdamWConfig {
            peak_lr: 0.01,
            warmup_steps: 0,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..AdamWConfig::lm_stage()
        };
        let mut opt = OptimizerState::new(cfg, &store);
        opt.step(&mut store);
        // m̂ = 1, v̂ = 1 -> update = r / (1 + eps)
        let moved = 1.0 - store.get(id).value.item();
        assert!((moved - 0.01 / (1.0 + 1e-6)).abs() < 1e-12, "moved {moved}");
    }

    #[test]
    fn frozen_params_are_not_touched() {
        let mut store = scalar_store(2.0);
        let id = store.find("x").unwrap();
        store.get_mut(id).grad = Tensor::scalar(3.0);
        store.freeze_where(|n| n == "x");
        let mut opt = OptimizerState::new(AdamWConfig::lm_stage(), &store);
        for _ in 0..3 {
            opt.step(&mut store);
        }
        assert_eq!(store.get(id).value.item(), 2.0);
    }
}
