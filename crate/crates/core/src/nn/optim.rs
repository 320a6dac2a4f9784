//! Adam with decoupled weight decay.

use super::params::ParamSet;
use super::tensor::Gradients;
use std::collections::HashMap;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one update to every trainable var that received a gradient.
    pub fn step(&mut self, params: &ParamSet, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for var in params.iter() {
            if !var.trainable() {
                continue;
            }
            let value = var.value();
            let Some(g) = grads.wrt(&value) else { continue };
            let (m, v) = self
                .state
                .entry(var.name().to_string())
                .or_insert_with(|| (vec![0.0; value.numel()], vec![0.0; value.numel()]));
            let mut data = value.data().to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            var.set_data(data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{ParamSet, Var};
    use crate::nn::tensor::Tensor;

    #[test]
    fn adamw_descends_quadratic() {
        let mut ps = ParamSet::new();
        let x = ps.add(Var::new("x", vec![3.0, -2.0], &[2]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..200 {
            let loss = x.value().mul(&x.value()).sum_all();
            let grads = loss.backward();
            opt.step(&ps, &grads);
        }
        let v = x.value();
        assert!(v.data().iter().all(|&a| a.abs() < 1e-2), "{:?}", v.data());
    }

    #[test]
    fn frozen_vars_do_not_move() {
        let mut ps = ParamSet::new();
        let x = ps.add(Var::new("x", vec![1.0], &[1]));
        let y = ps.add(Var::new("y", vec![1.0], &[1]));
        y.set_trainable(false);
        let mut opt = AdamW::new(0.1, 0.0);
        // loss depends on both; only x should move
        let loss = x.value().mul(&x.value()).sum_all().add(&x.value().mul(&y.value()).sum_all());
        let grads = loss.backward();
        opt.step(&ps, &grads);
        assert_ne!(x.value().data()[0], 1.0);
        assert_eq!(y.value().data()[0], 1.0);
    }
}
