//! Training objective: content, style and CCPL terms.
//!
//! Every term is computed per image and averaged over the batch.

use std::fmt;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::ccpl::{ccpl_total, CcplSettings, Projectors};
use crate::config::{LossLayerSets, LossWeights};
use crate::encoder::{Encoder, FeaturePyramid, Tap};
use crate::error::{Error, Result};
use crate::fusion::STD_EPS;
use crate::tensor::{lit, Float, Tensor};

fn batch_mean<T: Float>(tape: &Tape<T>, per_item: &Var<T>) -> Var<T> {
    tape.mean(per_item)
}

/// `sum_l ||phi_l(g) - phi_l(c)||_F`, batch-averaged.
pub fn content_loss<T: Float>(
    tape: &Tape<T>,
    generated: &FeaturePyramid<T>,
    content: &FeaturePyramid<T>,
    layers: &[Tap],
) -> Result<Var<T>> {
    let mut terms = Vec::with_capacity(layers.len());
    for &tap in layers {
        let diff = tape.sub(generated.get(tap)?, content.get(tap)?)?;
        terms.push(batch_mean(tape, &tape.norm_per_item(&diff)));
    }
    sum_or_zero(tape, &terms)
}

/// `sum_l ||mu(phi_l(g)) - mu(phi_l(s))|| + ||sigma(phi_l(g)) - sigma(phi_l(s))||`,
/// statistics per channel over space, batch-averaged. Spatial sizes may differ.
pub fn style_loss<T: Float>(
    tape: &Tape<T>,
    generated: &FeaturePyramid<T>,
    style: &FeaturePyramid<T>,
    layers: &[Tap],
) -> Result<Var<T>> {
    let eps = lit(STD_EPS);
    let mut terms = Vec::with_capacity(2 * layers.len());
    for &tap in layers {
        let (g, s) = (generated.get(tap)?, style.get(tap)?);
        if g.shape()[..2] != s.shape()[..2] {
            return Err(Error::Shape(format!("style loss at {tap}: {:?} vs {:?}", g.shape(), s.shape())));
        }
        let dmu = tape.sub(&tape.channel_mean(g), &tape.channel_mean(s))?;
        let dsigma = tape.sub(&tape.channel_std(g, eps), &tape.channel_std(s, eps))?;
        terms.push(batch_mean(tape, &tape.norm_per_item(&dmu)));
        terms.push(batch_mean(tape, &tape.norm_per_item(&dsigma)));
    }
    sum_or_zero(tape, &terms)
}

fn sum_or_zero<T: Float>(tape: &Tape<T>, terms: &[Var<T>]) -> Result<Var<T>> {
    if terms.is_empty() {
        return Ok(Var::constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(terms)
}

/// Unweighted values of each term, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub ccpl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_c * self.content + w.lambda_s * self.style + w.lambda_ccp * self.ccpl
    }

    pub fn is_finite(&self) -> bool {
        [self.content, self.style, self.ccpl, self.total].iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total={:.6} content={:.6} style={:.6} ccpl={:.6}", self.total, self.content, self.style, self.ccpl)
    }
}

/// Weights, layer sets and CCPL settings, bundled.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub layers: LossLayerSets,
    pub ccpl: CcplSettings,
}

impl Objective {
    /// Encoder taps needed from the generated image.
    pub fn generated_taps(&self) -> Vec<Tap> {
        let mut taps: Vec<Tap> = self.layers.content.iter().chain(&self.layers.style).copied().collect();
        if self.weights.lambda_ccp != 0.0 {
            taps.extend(&self.layers.ccpl);
        }
        taps.sort();
        taps.dedup();
        taps
    }

    /// `lambda_c L_c + lambda_s L_s + lambda_ccp L_ccp` from precomputed
    /// pyramids. The CCPL term only looks at the content and generated
    /// pyramids. With `lambda_ccp == 0` the CCPL term is skipped and reported
    /// as zero.
    pub fn evaluate<T: Float>(
        &self,
        tape: &Tape<T>,
        content: &FeaturePyramid<T>,
        style: &FeaturePyramid<T>,
        generated: &FeaturePyramid<T>,
        projectors: &Projectors<T>,
        rng: &mut impl Rng,
    ) -> Result<(Var<T>, LossBreakdown)> {
        let w = &self.weights;
        let l_c = content_loss(tape, generated, content, &self.layers.content)?;
        let l_s = style_loss(tape, generated, style, &self.layers.style)?;
        let mut terms = vec![tape.scale(&l_c, lit(w.lambda_c)), tape.scale(&l_s, lit(w.lambda_s))];
        let mut ccpl = 0.0;
        if w.lambda_ccp != 0.0 {
            let l_ccp = ccpl_total(tape, content, generated, &self.ccpl, projectors, rng)?;
            ccpl = l_ccp.item().to_f64_lossy();
            terms.push(tape.scale(&l_ccp, lit(w.lambda_ccp)));
        }
        let total = tape.add_all(&terms)?;
        let breakdown = LossBreakdown {
            content: l_c.item().to_f64_lossy(),
            style: l_s.item().to_f64_lossy(),
            ccpl,
            total: total.item().to_f64_lossy(),
        };
        Ok((total, breakdown))
    }
}

/// Convenience form taking images: encodes content and style without
/// gradient, the generated image with gradient.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Float>(
    tape: &Tape<T>,
    content: &Var<T>,
    style: &Var<T>,
    generated: &Var<T>,
    encoder: &Encoder<T>,
    objective: &Objective,
    projectors: &Projectors<T>,
    rng: &mut impl Rng,
) -> Result<(Var<T>, LossBreakdown)> {
    let taps = objective.generated_taps();
    let c = encoder.encode(tape, &content.detach(), &taps)?;
    let s = encoder.encode(tape, &style.detach(), &taps)?;
    let g = encoder.encode(tape, generated, &taps)?;
    objective.evaluate(tape, &c, &s, &g, projectors, rng)
}
