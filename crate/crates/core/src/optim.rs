//! Adam and AdamW over the trainable tensors of a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::tensor::{Array, Gradients, ParamStore, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Option<Array>>,
    pub v: Vec<Option<Array>>,
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One bias-corrected update of every trainable tensor that has a
    /// gradient. Frozen tensors are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = self.lr;
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else {
                continue;
            };
            let p = store.value_mut(id);
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            let m = self.m[id.0].get_or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Array::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                if c.weight_decay != 0.0 {
                    *pi -= lr * c.weight_decay * *pi;
                }
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning rate after the given validation history:
/// halve whenever `patience` consecutive epochs fail to beat the best value
/// by at least `min_delta`, never going below `floor`.
pub fn lr_schedule(initial: f64, val_history: &[f64], patience: usize, min_delta: f64, floor: f64) -> f64 {
    let mut lr = initial;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in val_history {
        if v <= best - min_delta {
            best = v;
            stale = 0;
        } else {
            stale += 1;
            if stale == patience {
                lr = (lr * 0.5).max(floor);
                stale = 0;
            }
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Array::scalar(v), trainable);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0, true);
        let mut opt = OptimState::new(AdamConfig::adam(1e-3));
        opt.step(&mut store, &vec![Some(Array::scalar(1.0))]).unwrap();
        let p = store.value(crate::tensor::ParamId(0)).data()[0];
        assert!((p + 1e-3).abs() < 1e-10, "{p}");
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut store = scalar_store(2.0, true);
        let mut opt = OptimState::new(AdamConfig::adam(1e-3));
        opt.step(&mut store, &vec![Some(Array::scalar(0.0))]).unwrap();
        assert_eq!(store.value(crate::tensor::ParamId(0)).data()[0], 2.0);

        let mut store = scalar_store(2.0, true);
        let mut opt = OptimState::new(AdamConfig::adamw(1e-3, 0.01));
        opt.step(&mut store, &vec![Some(Array::scalar(0.0))]).unwrap();
        assert_eq!(store.value(crate::tensor::ParamId(0)).data()[0], 2.0 - 1e-3 * 0.01 * 2.0);
    }

    #[test]
    fn frozen_never_moves() {
        let mut store = scalar_store(1.5, false);
        let mut opt = OptimState::new(AdamConfig::adamw(1e-1, 0.1));
        opt.step(&mut store, &vec![Some(Array::scalar(3.0))]).unwrap();
        assert_eq!(store.value(crate::tensor::ParamId(0)).data()[0], 1.5);
    }

    #[test]
    fn plateau_rule() {
        let improving: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        assert_eq!(lr_schedule(1e-3, &improving, 3, 1e-4, 1e-5), 1e-3);
        assert_eq!(lr_schedule(1e-3, &[1.0, 1.0, 1.0, 1.0], 3, 1e-4, 1e-5), 5e-4);
        assert_eq!(lr_schedule(1e-3, &[1.0; 10], 3, 1e-4, 1e-5), 1e-3 / 8.0);
        assert_eq!(lr_schedule(1e-4, &[1.0; 40], 3, 1e-4, 1e-5), 1e-5);
    }
}
