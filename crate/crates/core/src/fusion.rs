//! Content/style feature fusion: simple covariance transformation (SCT) and
//! an AdaIN backend.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::nn::{Conv2d, Module};
use crate::tensor::{lit, Float, Tensor};

/// Added to the variance before the square root in every std computation.
pub const STD_EPS: f64 = 1e-5;

/// `(f - mean) / std` per channel; also returns the `[N,C]` means and stds.
pub fn std_normalize<T: Float>(tape: &Tape<T>, f: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
    let mean = tape.channel_mean(f);
    let std = tape.channel_std(f, lit(STD_EPS));
    let out = tape.div_channel(&tape.sub_channel(f, &mean)?, &std)?;
    Ok((out, mean, std))
}

/// `f - mean` per channel; also returns the `[N,C]` means.
pub fn mean_normalize<T: Float>(tape: &Tape<T>, f: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let mean = tape.channel_mean(f);
    Ok((tape.sub_channel(f, &mean)?, mean))
}

/// AdaIN: content normalised by its own statistics, re-scaled with the
/// style's per-channel std and mean.
pub fn adain_fuse<T: Float>(tape: &Tape<T>, f_c: &Var<T>, f_s: &Var<T>) -> Result<Var<T>> {
    if f_c.shape().len() != 4 || f_s.shape().len() != 4 || f_c.shape()[..2] != f_s.shape()[..2] {
        return Err(Error::Config(format!("adain: content {:?} vs style {:?}", f_c.shape(), f_s.shape())));
    }
    let (norm, _, _) = std_normalize(tape, f_c)?;
    let s_mean = tape.channel_mean(f_s);
    let s_std = tape.channel_std(f_s, lit(STD_EPS));
    tape.add_channel(&tape.mul_channel(&norm, &s_std)?, &s_mean)
}

/// Learned SCT parameters: two 1x1 reduction stacks and a 1x1 restore layer.
#[derive(Clone)]
pub struct SctParams<T> {
    pub cnet: Vec<Conv2d<T>>,
    pub snet: Vec<Conv2d<T>>,
    pub restore: Conv2d<T>,
}

/// Channel schedule of the reduction stacks: `channels` (512 or 256) down to
/// `reduced` in three 1x1 layers.
pub fn reduction_schedule(channels: usize, reduced: usize) -> [usize; 4] {
    match channels {
        512 => [512, 128, 64, reduced],
        256 => [256, 128, 64, reduced],
        c => [c, (c / 4).max(reduced), (c / 8).max(reduced), reduced],
    }
}

/// Intermediate values of one SCT pass, exposed for inspection.
pub struct SctTrace<T> {
    /// `[N, r, r]` covariance of the reduced style feature.
    pub covariance: Var<T>,
    /// `[N, r, Hc, Wc]` covariance-multiplied content feature, before restore.
    pub fused_reduced: Var<T>,
    /// `[N, C, Hc, Wc]` restored feature with the style means added back.
    pub output: Var<T>,
}

impl<T: Float> SctParams<T> {
    pub fn random(schedule: &[usize], rng: &mut impl Rng) -> Self {
        fn stack<T: Float>(schedule: &[usize], rng: &mut impl Rng) -> Vec<Conv2d<T>> {
            schedule.windows(2).map(|w| Conv2d::random(w[0], w[1], 1, PadMode::Zero, rng)).collect()
        }
        let cnet = stack(schedule, rng);
        let snet = stack(schedule, rng);
        let restore = Conv2d::random(*schedule.last().unwrap(), schedule[0], 1, PadMode::Zero, rng);
        Self { cnet, snet, restore }
    }

    pub fn channels(&self) -> usize {
        self.restore.out_channels()
    }

    pub fn reduced(&self) -> usize {
        self.restore.in_channels()
    }

    fn run_stack(tape: &Tape<T>, stack: &[Conv2d<T>], x: &Var<T>) -> Result<Var<T>> {
        let mut x = x.clone();
        for (i, conv) in stack.iter().enumerate() {
            x = conv.forward(tape, &x, false)?;
            if i + 1 < stack.len() {
                x = tape.relu(&x);
            }
        }
        Ok(x)
    }

    /// Covariance `Xc Xcᵀ / (HW - 1)` of a `[N, r, H, W]` map, with `Xc` the
    /// per-channel centred, flattened feature.
    pub fn covariance(tape: &Tape<T>, f: &Var<T>) -> Result<Var<T>> {
        let (n, r, h, w) = f.value().dims4();
        let (centred, _) = mean_normalize(tape, f)?;
        let flat = tape.reshape(&centred, &[n, r, h * w])?;
        let gram = tape.bmm(&flat, &flat, false, true)?;
        let denom = (h * w).saturating_sub(1).max(1) as f64;
        Ok(tape.scale(&gram, lit(1.0 / denom)))
    }

    pub fn trace(&self, tape: &Tape<T>, f_c: &Var<T>, f_s: &Var<T>) -> Result<SctTrace<T>> {
        let c = self.channels();
        for (what, f) in [("content", f_c), ("style", f_s)] {
            if f.shape().len() != 4 || f.shape()[1] != c {
                return Err(Error::Config(format!(
                    "sct: {what} feature {:?} does not have {c} channels",
                    f.shape()
                )));
            }
        }
        if f_c.shape()[0] != f_s.shape()[0] {
            return Err(Error::Config(format!("sct: batch {:?} vs {:?}", f_c.shape(), f_s.shape())));
        }
        let (c_norm, _, _) = std_normalize(tape, f_c)?;
        let c_red = Self::run_stack(tape, &self.cnet, &c_norm)?;
        let (s_norm, s_mean) = mean_normalize(tape, f_s)?;
        let s_red = Self::run_stack(tape, &self.snet, &s_norm)?;
        let covariance = Self::covariance(tape, &s_red)?;
        let (n, r, hc, wc) = c_red.value().dims4();
        let c_flat = tape.reshape(&c_red, &[n, r, hc * wc])?;
        let fused = tape.bmm(&covariance, &c_flat, false, false)?;
        let fused_reduced = tape.reshape(&fused, &[n, r, hc, wc])?;
        let restored = self.restore.forward(tape, &fused_reduced, false)?;
        let output = tape.add_channel(&restored, &s_mean)?;
        Ok(SctTrace { covariance, fused_reduced, output })
    }
}

pub fn sct_fuse<T: Float>(tape: &Tape<T>, f_c: &Var<T>, f_s: &Var<T>, params: &SctParams<T>) -> Result<Var<T>> {
    Ok(params.trace(tape, f_c, f_s)?.output)
}

impl<T: Float> Module<T> for SctParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        for (i, c) in self.cnet.iter().enumerate() {
            c.visit(&format!("fusion.cnet.{i}"), f);
        }
        for (i, c) in self.snet.iter().enumerate() {
            c.visit(&format!("fusion.snet.{i}"), f);
        }
        self.restore.visit("fusion.restore", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        for (i, c) in self.cnet.iter_mut().enumerate() {
            c.visit_mut(&format!("fusion.cnet.{i}"), f);
        }
        for (i, c) in self.snet.iter_mut().enumerate() {
            c.visit_mut(&format!("fusion.snet.{i}"), f);
        }
        self.restore.visit_mut("fusion.restore", f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Sct,
    Adain,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Sct => "sct",
            FusionKind::Adain => "adain",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sct" => Ok(FusionKind::Sct),
            "adain" => Ok(FusionKind::Adain),
            other => Err(Error::Config(format!("unknown fusion backend `{other}` (sct | adain)"))),
        }
    }
}

/// A fusion backend that can sit between encoder and decoder.
pub trait FuseFeatures<T: Float>: Module<T> {
    fn kind(&self) -> FusionKind;
    fn fuse(&self, tape: &Tape<T>, f_c: &Var<T>, f_s: &Var<T>) -> Result<Var<T>>;
}

/// Exactly one backend per model.
#[derive(Clone)]
pub enum Fusion<T> {
    Sct(SctParams<T>),
    Adain,
}

impl<T: Float> Fusion<T> {
    pub fn random(kind: FusionKind, channels: usize, reduced: usize, rng: &mut impl Rng) -> Self {
        match kind {
            FusionKind::Sct => Fusion::Sct(SctParams::random(&reduction_schedule(channels, reduced), rng)),
            FusionKind::Adain => Fusion::Adain,
        }
    }
}

impl<T: Float> Module<T> for Fusion<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Arc<Tensor<T>>)) {
        if let Fusion::Sct(p) = self {
            p.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Arc<Tensor<T>>)) {
        if let Fusion::Sct(p) = self {
            p.visit_params_mut(f);
        }
    }
}

impl<T: Float> FuseFeatures<T> for Fusion<T> {
    fn kind(&self) -> FusionKind {
        match self {
            Fusion::Sct(_) => FusionKind::Sct,
            Fusion::Adain => FusionKind::Adain,
        }
    }

    fn fuse(&self, tape: &Tape<T>, f_c: &Var<T>, f_s: &Var<T>) -> Result<Var<T>> {
        match self {
            Fusion::Sct(p) => sct_fuse(tape, f_c, f_s, p),
            Fusion::Adain => adain_fuse(tape, f_c, f_s),
        }
    }
}
