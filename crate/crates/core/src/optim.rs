//! Adam.

use std::collections::BTreeMap;

use crate::autograd::Grads;
use crate::nn::Module;
use crate::tensor::{lit, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter name.
#[derive(Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter of `module`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, module: &mut impl Module<T>, grads: &Grads<T>) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps, lr): (T, T, T, T) = (lit(c.beta1), lit(c.beta2), lit(c.eps), lit(c.lr));
        let (bc1, bc2): (T, T) = (lit(bc1), lit(bc2));
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        module.visit_params_mut(&mut |name, param| {
            let zero;
            let g = match grads.wrt(param) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(param.shape());
                    &zero
                }
            };
            let m = m_all.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()));
            let v = v_all.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape()));
            let mut p = (**param).clone();
            for (((p, m), v), &g) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
            *param = std::sync::Arc::new(p);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Tape, Var};
    use std::sync::Arc;

    struct Quad {
        x: Arc<Tensor<f64>>,
    }

    impl Module<f64> for Quad {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<f64>>)) {
            f("x", &self.x);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<f64>>)) {
            f("x", &mut self.x);
        }
    }

    fn grads(q: &Quad) -> Grads<f64> {
        let tape = Tape::new();
        let x = tape.param(&q.x);
        let target = Var::constant(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let d = tape.sub(&x, &target).unwrap();
        let loss = tape.sum(&tape.mul(&d, &d).unwrap());
        tape.backward(&loss).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut q = Quad { x: Arc::new(Tensor::new(&[2], vec![3.0, 0.0]).unwrap()) };
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let g = grads(&q);
        adam.step(&mut q, &g);
        assert!((q.x.data()[0] - 2.9).abs() < 1e-6);
        assert!((q.x.data()[1] - (-0.1)).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut q = Quad { x: Arc::new(Tensor::new(&[2], vec![3.0, 0.5]).unwrap()) };
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        for _ in 0..3 {
            let g = grads(&q);
            adam.step(&mut q, &g);
        }
        assert_eq!(q.x.data(), &[3.0, 0.5]);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut q = Quad { x: Arc::new(Tensor::new(&[2], vec![3.0, 0.0]).unwrap()) };
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let g = grads(&q);
            adam.step(&mut q, &g);
        }
        assert!((q.x.data()[0] - 1.0).abs() < 1e-2 && (q.x.data()[1] + 2.0).abs() < 1e-2);
    }
}
