//! First-order optimizers over a [`ParamStore`]. Frozen parameters are never touched.

use crate::autograd::{Param, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stochastic gradient descent with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self { momentum: T::from_f64_lossy(momentum), velocity: Vec::new() }
    }

    /// `v = momentum * v + g; p -= lr(p) * v` for every unfrozen parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: impl Fn(&Param<T>) -> f64) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(k).and_then(Option::as_ref) else { continue };
            let p = params.get_mut(id);
            if p.frozen {
                continue;
            }
            let rate = T::from_f64_lossy(lr(p));
            let v = self.velocity[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vv, gg), pp) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vv = self.momentum * *vv + *gg;
                *pp -= rate * *vv;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1: T::from_f64_lossy(beta1),
            beta2: T::from_f64_lossy(beta2),
            eps: T::from_f64_lossy(eps),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: impl Fn(&Param<T>) -> f64) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(k).and_then(Option::as_ref) else { continue };
            let p = params.get_mut(id);
            if p.frozen {
                continue;
            }
            let rate = T::from_f64_lossy(lr(p));
            let m = self.m[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((mm, vv), gg), pp) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()).zip(p.value.data_mut()) {
                *mm = self.beta1 * *mm + (T::one() - self.beta1) * *gg;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * *gg * *gg;
                *pp -= rate * (*mm / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}
