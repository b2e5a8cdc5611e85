//! Decoupled-weight-decay Adam with a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::Tensor;
use super::params::{ParamStore, StoredTensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, StoredTensor>,
    pub v: BTreeMap<String, StoredTensor>,
}

/// Parameters that receive weight decay: matrices and kernels, not biases or prototypes.
fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + wd * *p);
                });
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            m: self.m.iter().map(|(k, t)| (k.clone(), t.into())).collect(),
            v: self.v.iter().map(|(k, t)| (k.clone(), t.into())).collect(),
        }
    }

    pub fn restore(weight_decay: f64, state: &AdamState) -> Option<Self> {
        let mut opt = Self::new(weight_decay);
        opt.step = state.step;
        for (k, t) in &state.m {
            opt.m.insert(k.clone(), t.to_tensor()?);
        }
        for (k, t) in &state.v {
            opt.v.insert(k.clone(), t.to_tensor()?);
        }
        Some(opt)
    }
}

/// `base · ½(1 + cos(π·step/total))`, clamped at the end of the schedule.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * frac).cos())
}
