//! Adam with bias correction. One instance per alternating phase
//! (discriminators vs. generator side); moments are addressed by parameter id
//! and serialized with checkpoints.

use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    moments: HashMap<usize, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam { beta1, beta2, eps: 1e-8, step_count: 0, moments: HashMap::new() }
    }

    /// One update over `updates`: (parameter, gradient) pairs. Parameters not
    /// listed are untouched, as are their moments.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, updates: &[(ParamId, &Tensor)]) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for &(id, grad) in updates {
            let entry = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let (m, v) = entry;
            let value = store.value_mut(id);
            let vd = value.data_mut();
            let md = m.data_mut();
            let vvd = v.data_mut();
            let gd = grad.data();
            for i in 0..gd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vvd[i] = self.beta2 * vvd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vvd[i] / bc2;
                vd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (usize, &(Tensor, Tensor))> {
        let mut keys: Vec<_> = self.moments.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(move |k| (k, &self.moments[&k]))
    }

    pub fn set_moment(&mut self, param_index: usize, m: Tensor, v: Tensor) {
        self.moments.insert(param_index, (m, v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;

    /// First step must equal the closed form: m_hat = g, v_hat = g^2,
    /// delta = lr * g / (|g| + eps).
    #[test]
    fn first_step_matches_closed_form() {
        let mut store = ParamStore::new();
        let p = store.add("p", ParamGroup::EncoderSrc, Tensor::from_vec(&[2], vec![1.0, -2.0]), true);
        let grad = Tensor::from_vec(&[2], vec![0.5, -0.25]);
        let mut adam = Adam::new(0.5, 0.999);
        adam.step(&mut store, 0.1, &[(p, &grad)]);
        let got = store.value(p).data().to_vec();
        for (i, (&x0, &g)) in [1.0, -2.0].iter().zip(grad.data()).enumerate() {
            let expect = x0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    /// Two steps against an independently coded reference update.
    #[test]
    fn two_steps_match_reference() {
        let (b1, b2, eps, lr) = (0.5, 0.999, 1e-8, 0.01);
        let grads = [vec![0.3, -0.7], vec![-0.1, 0.2]];
        let mut x = [2.0, -1.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for (step, g) in grads.iter().enumerate() {
            let t = (step + 1) as f64;
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1_pow(b1, t));
                let vh = v[i] / (1.0 - b1_pow(b2, t));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let mut store = ParamStore::new();
        let p = store.add("p", ParamGroup::EncoderSrc, Tensor::from_vec(&[2], vec![2.0, -1.0]), true);
        let mut adam = Adam::new(b1, b2);
        for g in &grads {
            let gt = Tensor::from_vec(&[2], g.clone());
            adam.step(&mut store, lr, &[(p, &gt)]);
        }
        for i in 0..2 {
            assert!((store.value(p).data()[i] - x[i]).abs() < 1e-12);
        }
    }

    fn b1_pow(b: f64, t: f64) -> f64 {
        b.powf(t)
    }
}
