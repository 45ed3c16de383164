use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tape::Gradients;
use crate::nn::Bound;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| alloc::vec![T::zero(); store.get(id).len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients of the bound parameters.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) {
        let flat: Vec<Option<&[T]>> = bound.vars().iter().map(|v| grads.get(*v)).collect();
        self.step_flat(store, &flat);
    }

    pub fn step_flat(&mut self, store: &mut ParamStore<T>, grads: &[Option<&[T]>]) {
        self.t += 1;
        let (b1, b2) = (T::c(self.cfg.beta1), T::c(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let lr = T::c(self.cfg.learning_rate);
        let eps = T::c(self.cfg.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[k] else { continue };
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::full(&[2], 1.0));
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &store);
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &store, true);
        let sq = tape.square(b.vars()[0]);
        let l = tape.sum(sq);
        let g = tape.backward(l);
        opt.step(&mut store, &b, &g);
        for v in store.get(store.find("x").unwrap()).data() {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::from_vec(&[3], alloc::vec![3.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &store, true);
            let sq = tape.square(b.vars()[0]);
            let l = tape.sum(sq);
            let g = tape.backward(l);
            opt.step(&mut store, &b, &g);
        }
        assert!(store.get(store.find("x").unwrap()).data().iter().all(|v| v.abs() < 1e-2));
    }
}
