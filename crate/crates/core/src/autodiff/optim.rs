//! Adam with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

/// Learning rate multiplied by `gamma` at each milestone iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepDecay {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let k = self.milestones.iter().filter(|m| iteration >= **m).count();
        self.base_lr * self.gamma.powi(k as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).rows, store.get(id).cols)).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = &grads.get(id).data;
            let (m, v) = (&mut self.m[id.0].data, &mut self.v[id.0].data);
            let p = &mut store.get_mut(id).data;
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn step_decay_milestones() {
        let s = StepDecay { base_lr: 1e-3, milestones: vec![10, 20], gamma: 0.1 };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(9), 1e-3);
        assert!((s.lr_at(10) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(25) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(&[3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let v = tape.param(&store, p);
            let sq = tape.square(v);
            let l = tape.sum_all(sq);
            let g = tape.backward(l, &store).unwrap();
            opt.step(&mut store, &g, 0.05);
        }
        assert!(store.get(p).data.iter().all(|v| v.abs() < 1e-3));
        assert_eq!(opt.steps(), 2000);
    }
}
