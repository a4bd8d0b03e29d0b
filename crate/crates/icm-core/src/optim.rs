//! Adam optimizer over an explicit list of trainable parameter ids.

use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Standard Adam with bias correction. Moment buffers are allocated
/// lazily per parameter, so one instance can serve any trainable subset.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![Vec::new(); store.len()],
            v: vec![Vec::new(); store.len()],
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every id in `ids` using `grads`.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>, ids: &[ParamId]) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let b1 = S::from_f64(self.beta1);
        let nb1 = S::from_f64(1.0 - self.beta1);
        let b2 = S::from_f64(self.beta2);
        let nb2 = S::from_f64(1.0 - self.beta2);
        for &id in ids {
            let n = store.get(id).len();
            if self.m[id.index()].is_empty() {
                self.m[id.index()] = vec![S::ZERO; n];
                self.v[id.index()] = vec![S::ZERO; n];
            }
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.get_mut(id);
            for i in 0..n {
                m[i] = b1 * m[i] + nb1 * g[i];
                v[i] = b2 * v[i] + nb2 * g[i] * g[i];
                let mhat = m[i].to_f64() / bc1;
                let vhat = v[i].to_f64() / bc2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                p[i] -= S::from_f64(delta);
            }
        }
    }
}
