//! Layers with parameters, and the parameter-visiting trait used by the
//! optimizer and checkpoints.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::PadMode;
use crate::tensor::{Float, Tensor};

/// Anything holding named parameters.
pub trait Module<T: Float> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }
}

/// He-normal initialisation, `N(0, 2 / fan_in)`, sampled in f64 and cast.
pub fn he_normal<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Square-kernel convolution with "same" padding of the given mode.
#[derive(Clone)]
pub struct Conv2d<T> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
    pub pad_mode: PadMode,
}

impl<T: Float> Conv2d<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, pad_mode: PadMode) -> Self {
        Self { weight: Arc::new(weight), bias: Arc::new(bias), pad_mode }
    }

    pub fn random(cin: usize, cout: usize, k: usize, pad_mode: PadMode, rng: &mut impl Rng) -> Self {
        Self::new(he_normal(&[cout, cin, k, k], cin * k * k, rng), Tensor::zeros(&[cout]), pad_mode)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `frozen` feeds the weights in as constants so no gradient reaches them.
    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>, frozen: bool) -> Result<Var<T>> {
        let (w, b) = if frozen {
            (Var::constant(self.weight.clone()), Var::constant(self.bias.clone()))
        } else {
            (tape.param(&self.weight), tape.param(&self.bias))
        };
        let padded = tape.pad2d(x, self.kernel() / 2, self.pad_mode);
        tape.conv2d(&padded, &w, Some(&b))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Fully connected layer on `[rows, in]` matrices; weight is `[in, out]`.
#[derive(Clone)]
pub struct Linear<T> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
}

impl<T: Float> Linear<T> {
    pub fn random(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Arc::new(he_normal(&[fan_in, fan_out], fan_in, rng)),
            bias: Arc::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = tape.bmm(x, &tape.param(&self.weight), false, false)?;
        tape.add_row(&y, &tape.param(&self.bias))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}
