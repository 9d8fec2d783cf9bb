//! First-order optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::nn::{Bound, Group, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam or plain gradient descent with a learning rate per parameter group.
/// Groups with a zero learning rate are never touched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: Vec<(Group, f64)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: &[(Group, f64)]) -> Self {
        Self {
            kind,
            lr: lr.to_vec(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr_for(&self, group: Group) -> f64 {
        self.lr.iter().find(|(g, _)| *g == group).map_or(0.0, |(_, lr)| *lr)
    }

    pub fn set_lr(&mut self, group: Group, lr: f64) {
        match self.lr.iter_mut().find(|(g, _)| *g == group) {
            Some(entry) => entry.1 = lr,
            None => self.lr.push((group, lr)),
        }
    }

    /// Applies one update using the gradients of the variables in `bound`.
    pub fn step(&mut self, ps: &mut ParamSet, bound: &Bound, grads: &Gradients) {
        let grad_of = |i: usize| grads.get(bound.vars()[i]);
        self.step_with(ps, grad_of);
    }

    /// Applies one update with gradients supplied per parameter index.
    pub fn step_with<'a>(&mut self, ps: &mut ParamSet, grad_of: impl Fn(usize) -> Option<&'a [f64]>) {
        if self.m.is_empty() {
            self.m = ps.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in ps.params_mut().iter_mut().enumerate() {
            let lr = self.lr.iter().find(|(g, _)| *g == p.group).map_or(0.0, |(_, lr)| *lr);
            if lr == 0.0 {
                continue;
            }
            let Some(g) = grad_of(i) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    p.data.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..g.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        p.data[k] -= lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Stand-alone Adam state for a single free tensor (latent or symbol codes).
#[derive(Clone, Debug)]
pub struct VectorAdam {
    kind: OptimizerKind,
    lr: f64,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl VectorAdam {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => x.iter_mut().zip(g).for_each(|(w, d)| *w -= self.lr * d),
            OptimizerKind::Adam => {
                let bc1 = 1.0 - 0.9f64.powi(self.t as i32);
                let bc2 = 1.0 - 0.999f64.powi(self.t as i32);
                for k in 0..x.len() {
                    self.m[k] = 0.9 * self.m[k] + 0.1 * g[k];
                    self.v[k] = 0.999 * self.v[k] + 0.001 * g[k] * g[k];
                    x[k] -= self.lr * (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + 1e-8);
                }
            }
        }
    }
}
