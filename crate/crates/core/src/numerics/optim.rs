use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (&id, g) in grads {
            if !store.get(id).trainable {
                continue;
            }
            let n = g.len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.1, 0.0);
        let grads = BTreeMap::from([(id, Tensor::scalar(5.0))]);
        opt.step(&mut store, &grads);
        assert!((store.value(id).item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut store, &BTreeMap::from([(id, Tensor::scalar(5.0))]));
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &BTreeMap::from([(id, Tensor::scalar(0.0))]));
        assert!((store.value(id).item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
