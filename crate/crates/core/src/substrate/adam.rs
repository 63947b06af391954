use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::math;

/// Adam with bias correction. Frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam { lr, beta1: betas.0, beta2: betas.1, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = params.trainable_names().cloned().collect();
        for name in &names {
            let Some(g) = grads.get(name) else {
                bail!(Training, "missing gradient for trainable parameter {name}");
            };
            if g.len() != params.get(name).map_or(0, Tensor::len) {
                bail!(Training, "gradient for {name} has the wrong size");
            }
            if !g.all_finite() {
                bail!(Numeric, "non-finite gradient for {name}");
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powf(self.beta1, t as f64);
        let bc2 = 1.0 - math::powf(self.beta2, t as f64);
        for name in names {
            let g = grads[&name].data();
            let p = params.get_mut(&name).expect("trainable name exists").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let mut p = single(0.5);
        let mut opt = Adam::new(0.01);
        let mut g = BTreeMap::new();
        g.insert(String::from("w"), Tensor::scalar(1.0));
        opt.step(&mut p, &g).unwrap();
        let expected = 0.5 - 0.01 * (1.0 / (1.0 + 1e-8));
        assert_eq!(p.get("w").unwrap().data()[0], expected);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn frozen_and_zero_grad_unchanged() {
        let mut p = single(0.25);
        p.insert("f", Tensor::new([3], alloc::vec![1.0, -2.0, 3.5]).unwrap());
        p.freeze("f").unwrap();
        let before = p.clone();
        let mut opt = Adam::new(0.1);
        let mut g = BTreeMap::new();
        g.insert(String::from("w"), Tensor::scalar(0.0));
        g.insert(String::from("f"), Tensor::full([3], 9.0));
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(1.0);
        let mut opt = Adam::new(0.1);
        let err = opt.step(&mut p, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, crate::error::Error::Training(_)));
    }
}
