//! First-order optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state over every trainable entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    /// Plain SGD with heavy-ball momentum 0.9.
    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update. `grads[i]` belongs to the i-th store entry; `None`
    /// and non-trainable entries are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        if self.m.len() != store.len() {
            self.m = vec![None; store.len()];
            self.v = vec![None; store.len()];
        }
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !store.entries()[i].trainable {
                continue;
            }
            let wd = self.weight_decay;
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; p.len()]);
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gi), mi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let gi = gi + wd * *w;
                        *mi = self.momentum * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.v[i].get_or_insert_with(|| vec![0.0; p.len()]);
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi + wd * *w;
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Triangular cyclic learning rate between `low` and `high` with a
/// half-cycle of `half_period` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CyclicLr {
    pub low: f64,
    pub high: f64,
    pub half_period: usize,
}

impl CyclicLr {
    pub fn at(&self, step: usize) -> f64 {
        let hp = self.half_period.max(1) as f64;
        let phase = (step as f64 / hp) % 2.0;
        let frac = if phase <= 1.0 { phase } else { 2.0 - phase };
        self.low + (self.high - self.low) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_lr_is_triangular() {
        let s = CyclicLr {
            low: 1e-6,
            high: 1e-4,
            half_period: 10,
        };
        assert_eq!(s.at(0), 1e-6);
        assert!((s.at(10) - 1e-4).abs() < 1e-18);
        assert!((s.at(5) - s.at(15)).abs() < 1e-18);
        assert!((s.at(20) - 1e-6).abs() < 1e-18);
    }

    fn minimize(mut opt: Optimizer, lr: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        for _ in 0..500 {
            let x = store.get(id).data().to_vec();
            let g = Tensor::new(vec![2], vec![2.0 * x[0], 8.0 * x[1]]);
            opt.step(&mut store, &[Some(g)], lr);
        }
        store.get(id).data().iter().map(|v| v.abs()).sum()
    }

    #[test]
    fn optimizers_reach_quadratic_minimum() {
        assert!(minimize(Optimizer::adam(), 0.05) < 1e-3);
        assert!(minimize(Optimizer::sgd(), 0.01) < 1e-3);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store.add_buffer("b", Tensor::ones(vec![1]));
        Optimizer::adam().step(&mut store, &[Some(Tensor::ones(vec![1]))], 1.0);
        assert_eq!(store.get(id).data(), &[1.0]);
    }
}
