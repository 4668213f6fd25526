//! Adam optimizer and the warmup + cosine-annealing learning-rate schedule.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Linear warmup from 0 to `lr0` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub lr0: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.lr0 * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.lr0 * (1.0 + (PI * progress).cos())
    }
}

/// Per-video gradients accumulated across a batch, aligned with store order.
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect(),
        }
    }

    /// Add `scale` times the graph's gradients into the buffer.
    pub fn accumulate(&mut self, graph: &Graph, bound: &Bound, scale: f64) {
        for (i, grad) in self.grads.iter_mut().enumerate() {
            if let Some(g) = graph.grad(bound.vars()[i]) {
                for (acc, v) in grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * v;
                }
            }
        }
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.grads[index]
    }

    pub fn reset(&mut self) {
        for g in self.grads.iter_mut() {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay (inactive at the default decay of 0).
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect(),
            v: store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(i).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[j]);
                if !p[j].is_finite() {
                    return Err(Error::numeric(format!("parameter {}", store.name(id))));
                }
            }
        }
        Ok(())
    }
}
