//! Decoder mirroring the encoder trunk: nearest-neighbour 2x upsampling in
//! place of pooling, reflection-padded 3x3 convolutions, linear output.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::nn::{Conv2d, Module};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Convolution `cin -> cout`, followed by a rectifier unless it is the
    /// output layer.
    Conv { cin: usize, cout: usize },
    Up,
}

fn schedule(mode: Mode) -> Vec<Step> {
    use Step::*;
    let tail = [
        Conv { cin: 128, cout: 128 },
        Conv { cin: 128, cout: 64 },
        Up,
        Conv { cin: 64, cout: 64 },
        Conv { cin: 64, cout: 3 },
    ];
    let head: Vec<Step> = match mode {
        Mode::Artistic => vec![
            Conv { cin: 512, cout: 256 },
            Up,
            Conv { cin: 256, cout: 256 },
            Conv { cin: 256, cout: 256 },
            Conv { cin: 256, cout: 256 },
            Conv { cin: 256, cout: 128 },
            Up,
        ],
        Mode::Photorealistic => vec![Conv { cin: 256, cout: 128 }, Up],
    };
    head.into_iter().chain(tail).collect()
}

#[derive(Clone)]
pub struct Decoder<T> {
    mode: Mode,
    convs: Vec<Conv2d<T>>,
}

impl<T: Float> Decoder<T> {
    pub fn random(mode: Mode, rng: &mut impl Rng) -> Self {
        let convs = schedule(mode)
            .into_iter()
            .filter_map(|s| match s {
                Step::Conv { cin, cout } => Some(Conv2d::random(cin, cout, 3, PadMode::Reflect, rng)),
                Step::Up => None,
            })
            .collect();
        Self { mode, convs }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `[N, C, h, w] -> [N, 3, f*h, f*w]` with `f` the mode's downsampling
    /// factor. Output is not clamped.
    pub fn decode(&self, tape: &Tape<T>, fused: &Var<T>) -> Result<Var<T>> {
        let c = self.mode.deepest_channels();
        if fused.shape().len() != 4 || fused.shape()[1] != c {
            return Err(Error::Config(format!(
                "decoder for {} mode expects {c} input channels, got {:?}",
                self.mode,
                fused.shape()
            )));
        }
        let mut x = fused.clone();
        let mut convs = self.convs.iter();
        let last = self.convs.len() - 1;
        let mut i = 0;
        for step in schedule(self.mode) {
            match step {
                Step::Up => x = tape.upsample2(&x),
                Step::Conv { .. } => {
                    x = convs.next().expect("schedule and convs agree").forward(tape, &x, false)?;
                    if i < last {
                        x = tape.relu(&x);
                    }
                    i += 1;
                }
            }
        }
        Ok(x)
    }
}

impl<T: Float> Module<T> for Decoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("decoder.{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("decoder.{i}"), f);
        }
    }
}
