//! First-order optimizers over [`Parameterized`] models.
//!
//! State vectors are allocated lazily on the first step and matched to
//! parameter tensors by visit order.

use super::Parameterized;
use crate::scalar::Scalar;

/// SGD with classical momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<F: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step<M: Parameterized<F> + ?Sized>(&mut self, model: &mut M) {
        let (lr, mu, wd) = (F::of(self.lr), F::of(self.momentum), F::of(self.weight_decay));
        let velocity = &mut self.velocity;
        let mut idx = 0;
        model.visit_params(&mut |p, g| {
            if velocity.len() <= idx {
                velocity.push(vec![F::zero(); p.len()]);
            }
            let v = &mut velocity[idx];
            for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let d = *g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
            idx += 1;
        });
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<M: Parameterized<F> + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let step = self.lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        let (b1f, b2f, stepf, eps) = (F::of(b1), F::of(b2), F::of(step), F::of(self.eps));
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params(&mut |p, g| {
            if ms.len() <= idx {
                ms.push(vec![F::zero(); p.len()]);
                vs.push(vec![F::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.len() {
                m[i] = b1f * m[i] + (F::one() - b1f) * g[i];
                v[i] = b2f * v[i] + (F::one() - b2f) * g[i] * g[i];
                p[i] -= stepf * m[i] / (v[i].sqrt() + eps);
            }
            idx += 1;
        });
    }
}
